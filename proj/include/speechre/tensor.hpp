#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "speechre/common.hpp"

namespace speechre {

// Dense row-major tensor of doubles, rank 1..4. Shapes are dynamic; this is
// the one numeric container shared by features, the autodiff tape, and the
// model parameters.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(numel(shape), 0.0) {}

    Tensor(std::initializer_list<std::size_t> s)
        : shape(s), data(numel(shape), 0.0) {}

    static std::size_t numel(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t({std::size_t{1}});
        t.data[0] = v;
        return t;
    }

    static Tensor row(std::vector<double> values) {
        Tensor t;
        t.shape = {std::size_t{1}, values.size()};
        t.data = std::move(values);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& operator()(std::size_t i) { return data[i]; }
    double operator()(std::size_t i) const { return data[i]; }

    double& operator()(std::size_t i, std::size_t j) {
        return data[i * shape[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data[i * shape[1] + j];
    }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) {
        for (double& x : data) x = v;
    }

    bool operator==(const Tensor& o) const {
        return shape == o.shape && data == o.data;
    }
};

}  // namespace speechre
