#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "speechre/common.hpp"
#include "speechre/rng.hpp"
#include "speechre/tensor.hpp"

namespace speechre::ad {

// ---------------------------------------------------------------------------
// Raw tensor kernels (no tape). Accumulating forms keep backward
// allocation-free.
// ---------------------------------------------------------------------------

// C += A * B              {m,k} x {k,n}
inline void t_matmul_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &c.data[i * n];
        const double* arow = &a.data[i * k];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T            {m,k} x {n,k}
inline void t_matmul_nt_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* crow = &c.data[i * n];
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b.data[j * k];
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B            {k,m} x {k,n}
inline void t_matmul_tn_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = &a.data[p * m];
        const double* brow = &b.data[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes during the forward pass; the node
// order is a topological order, so backward() is a single reverse sweep.
// One tape per training step / eval forward; tapes are neither copyable nor
// movable because backward closures capture `this`.
class Tape {
public:
    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, nullptr);
    }

    const Tensor& val(Var v) const { return node(v).value; }
    const Tensor& grad(Var v) const {
        const Node& n = node(v);
        if (!n.requires_grad) throw ContractError("tape: node has no gradient");
        return n.grad;
    }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var root) {
        Node& r = node(root);
        if (r.value.size() != 1) throw ContractError("tape: backward root must be a scalar");
        if (!r.requires_grad) throw ContractError("tape: backward root requires no gradient");
        r.grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.back) n.back();
        }
    }

    // ---- elementwise / broadcast ----

    Var add(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw ContractError("add: shape mismatch");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
        const bool rg = requires_grad(a) || requires_grad(b);
        Var o = push(std::move(out), rg, nullptr);
        set_back(o, [this, a, b, o] {
            const Tensor& g = nodes_[o.id].grad;
            if (nodes_[a.id].requires_grad) {
                Tensor& ga = nodes_[a.id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[b.id].requires_grad) {
                Tensor& gb = nodes_[b.id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
            }
        });
        return o;
    }

    // {T,d} + {d} broadcast over rows
    Var add_row(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.size() != ta.dim(1)) throw ContractError("add_row: shape mismatch");
        Tensor out = ta;
        const std::size_t rows = ta.dim(0), cols = ta.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out(i, j) += tb.data[j];
        Var o = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
        set_back(o, [this, a, b, o, rows, cols] {
            const Tensor& g = nodes_[o.id].grad;
            if (nodes_[a.id].requires_grad) {
                Tensor& ga = nodes_[a.id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[b.id].requires_grad) {
                Tensor& gb = nodes_[b.id].grad;
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) gb.data[j] += g.data[i * cols + j];
            }
        });
        return o;
    }

    Var add_const(Var a, const Tensor& c) {
        const Tensor& ta = val(a);
        if (!ta.same_shape(c)) throw ContractError("add_const: shape mismatch");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o] { accumulate_identity(a, o); });
        return o;
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (double& v : out.data) v *= c;
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, c] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
        });
        return o;
    }

    Var relu(Var a) {
        Tensor out = val(a);
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& x = nodes_[a.id].value;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x.data[i] > 0.0) ga.data[i] += g.data[i];
        });
        return o;
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& y = nodes_[o.id].value;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
        });
        return o;
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
            throw ContractError("matmul: shape mismatch");
        }
        Tensor out({ta.dim(0), tb.dim(1)});
        t_matmul_acc(out, ta, tb);
        Var o = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
        set_back(o, [this, a, b, o] {
            const Tensor& g = nodes_[o.id].grad;
            if (nodes_[a.id].requires_grad) t_matmul_nt_acc(nodes_[a.id].grad, g, nodes_[b.id].value);
            if (nodes_[b.id].requires_grad) t_matmul_tn_acc(nodes_[b.id].grad, nodes_[a.id].value, g);
        });
        return o;
    }

    // A * B^T
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1)) {
            throw ContractError("matmul_nt: shape mismatch");
        }
        Tensor out({ta.dim(0), tb.dim(0)});
        t_matmul_nt_acc(out, ta, tb);
        Var o = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
        set_back(o, [this, a, b, o] {
            const Tensor& g = nodes_[o.id].grad;
            if (nodes_[a.id].requires_grad) t_matmul_acc(nodes_[a.id].grad, g, nodes_[b.id].value);
            if (nodes_[b.id].requires_grad) t_matmul_tn_acc(nodes_[b.id].grad, g, nodes_[a.id].value);
        });
        return o;
    }

    // ---- row-wise softmax family ----

    // softmax over the last axis of a {T,n} matrix; add_mask (same shape) is
    // applied before normalization, e.g. -1e30 entries for causal masking
    Var softmax_rows(Var a, const Tensor* add_mask = nullptr) {
        Tensor out = val(a);
        if (out.rank() != 2) throw ContractError("softmax_rows: expected rank-2 input");
        if (add_mask && !out.same_shape(*add_mask)) throw ContractError("softmax_rows: mask shape");
        const std::size_t rows = out.dim(0), cols = out.dim(1);
        for (std::size_t i = 0; i < rows; ++i) {
            double* r = &out.data[i * cols];
            if (add_mask)
                for (std::size_t j = 0; j < cols; ++j) r[j] += add_mask->data[i * cols + j];
            double mx = r[0];
            for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                r[j] = std::exp(r[j] - mx);
                sum += r[j];
            }
            for (std::size_t j = 0; j < cols; ++j) r[j] /= sum;
        }
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, rows, cols] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& y = nodes_[o.id].value;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < rows; ++i) {
                const double* gr = &g.data[i * cols];
                const double* yr = &y.data[i * cols];
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                double* gar = &ga.data[i * cols];
                for (std::size_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
            }
        });
        return o;
    }

    Var log_softmax_rows(Var a) {
        Tensor out = val(a);
        if (out.rank() != 2) throw ContractError("log_softmax_rows: expected rank-2 input");
        const std::size_t rows = out.dim(0), cols = out.dim(1);
        for (std::size_t i = 0; i < rows; ++i) {
            double* r = &out.data[i * cols];
            double mx = r[0];
            for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) sum += std::exp(r[j] - mx);
            const double lse = mx + std::log(sum);
            for (std::size_t j = 0; j < cols; ++j) r[j] -= lse;
        }
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, rows, cols] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& y = nodes_[o.id].value;  // log-probs
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < rows; ++i) {
                const double* gr = &g.data[i * cols];
                const double* yr = &y.data[i * cols];
                double gsum = 0.0;
                for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
                double* gar = &ga.data[i * cols];
                for (std::size_t j = 0; j < cols; ++j) gar[j] += gr[j] - std::exp(yr[j]) * gsum;
            }
        });
        return o;
    }

    // ---- normalization ----

    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw ContractError("layer_norm: expected rank-2 input");
        const std::size_t rows = tx.dim(0), cols = tx.dim(1);
        const Tensor& g = val(gain);
        const Tensor& b = val(bias);
        if (g.size() != cols || b.size() != cols) throw ContractError("layer_norm: gain/bias size");

        Tensor normalized({rows, cols});
        std::vector<double> inv_std(rows);
        Tensor out({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            const double* r = &tx.data[i * cols];
            double mean = 0.0;
            for (std::size_t j = 0; j < cols; ++j) mean += r[j];
            mean /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                const double d = r[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[i] = inv;
            for (std::size_t j = 0; j < cols; ++j) {
                const double xh = (r[j] - mean) * inv;
                normalized(i, j) = xh;
                out(i, j) = xh * g.data[j] + b.data[j];
            }
        }
        const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
        Var o = push(std::move(out), rg, nullptr);
        set_back(o, [this, x, gain, bias, o, rows, cols, normalized = std::move(normalized),
                     inv_std = std::move(inv_std)] {
            const Tensor& go = nodes_[o.id].grad;
            const Tensor& gn = nodes_[gain.id].value;
            if (nodes_[gain.id].requires_grad || nodes_[bias.id].requires_grad) {
                Tensor& gg = nodes_[gain.id].grad;
                Tensor& gb = nodes_[bias.id].grad;
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double d = go.data[i * cols + j];
                        if (nodes_[gain.id].requires_grad) gg.data[j] += d * normalized(i, j);
                        if (nodes_[bias.id].requires_grad) gb.data[j] += d;
                    }
                }
            }
            if (nodes_[x.id].requires_grad) {
                Tensor& gx = nodes_[x.id].grad;
                for (std::size_t i = 0; i < rows; ++i) {
                    double mean_d = 0.0, mean_dxh = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double d = go.data[i * cols + j] * gn.data[j];
                        mean_d += d;
                        mean_dxh += d * normalized(i, j);
                    }
                    mean_d /= static_cast<double>(cols);
                    mean_dxh /= static_cast<double>(cols);
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double d = go.data[i * cols + j] * gn.data[j];
                        gx.data[i * cols + j] +=
                            inv_std[i] * (d - mean_d - normalized(i, j) * mean_dxh);
                    }
                }
            }
        });
        return o;
    }

    // ---- shape plumbing ----

    Var slice_cols(Var a, std::size_t start, std::size_t count) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2 || start + count > ta.dim(1)) throw ContractError("slice_cols: range");
        const std::size_t rows = ta.dim(0), cols = ta.dim(1);
        Tensor out({rows, count});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < count; ++j) out(i, j) = ta.data[i * cols + start + j];
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, start, count, rows, cols] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    ga.data[i * cols + start + j] += g.data[i * count + j];
        });
        return o;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: empty");
        const std::size_t rows = val(parts[0]).dim(0);
        std::size_t total = 0;
        bool rg = false;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            if (tp.rank() != 2 || tp.dim(0) != rows) throw ContractError("concat_cols: shapes");
            total += tp.dim(1);
            rg = rg || requires_grad(p);
        }
        Tensor out({rows, total});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            const std::size_t c = tp.dim(1);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < c; ++j) out(i, off + j) = tp(i, j);
            off += c;
        }
        Var o = push(std::move(out), rg, nullptr);
        set_back(o, [this, parts, o, rows, total] {
            const Tensor& g = nodes_[o.id].grad;
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t c = nodes_[p.id].value.dim(1);
                if (nodes_[p.id].requires_grad) {
                    Tensor& gp = nodes_[p.id].grad;
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            gp.data[i * c + j] += g.data[i * total + off + j];
                }
                off += c;
            }
        });
        return o;
    }

    Var reshape(Var a, std::vector<std::size_t> shape) {
        const Tensor& ta = val(a);
        if (Tensor::numel(shape) != ta.size()) throw ContractError("reshape: element count");
        Tensor out;
        out.shape = std::move(shape);
        out.data = ta.data;
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o] { accumulate_identity(a, o); });
        return o;
    }

    // gather rows of an embedding table {V,d} by token id
    Var embed_rows(Var table, std::vector<int> ids) {
        const Tensor& tt = val(table);
        if (tt.rank() != 2) throw ContractError("embed_rows: table must be rank 2");
        const std::size_t v = tt.dim(0), d = tt.dim(1);
        Tensor out({ids.size(), d});
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto id = static_cast<std::size_t>(ids[t]);
            if (ids[t] < 0 || id >= v) throw ContractError("embed_rows: id out of range");
            for (std::size_t j = 0; j < d; ++j) out(t, j) = tt.data[id * d + j];
        }
        Var o = push(std::move(out), requires_grad(table), nullptr);
        set_back(o, [this, table, o, ids = std::move(ids), d] {
            if (!nodes_[table.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& gt = nodes_[table.id].grad;
            for (std::size_t t = 0; t < ids.size(); ++t) {
                const auto id = static_cast<std::size_t>(ids[t]);
                for (std::size_t j = 0; j < d; ++j) gt.data[id * d + j] += g.data[t * d + j];
            }
        });
        return o;
    }

    // mean over consecutive row blocks of size `block` (last block may be
    // shorter); {L,d} -> {ceil(L/block),d}
    Var mean_pool_rows(Var a, std::size_t block) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2 || block == 0) throw ContractError("mean_pool_rows: bad args");
        const std::size_t rows = ta.dim(0), cols = ta.dim(1);
        const std::size_t out_rows = (rows + block - 1) / block;
        Tensor out({out_rows, cols});
        for (std::size_t i = 0; i < out_rows; ++i) {
            const std::size_t lo = i * block;
            const std::size_t hi = std::min(rows, lo + block);
            for (std::size_t r = lo; r < hi; ++r)
                for (std::size_t j = 0; j < cols; ++j) out(i, j) += ta(r, j);
            const double inv = 1.0 / static_cast<double>(hi - lo);
            for (std::size_t j = 0; j < cols; ++j) out(i, j) *= inv;
        }
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, block, rows, cols, out_rows] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < out_rows; ++i) {
                const std::size_t lo = i * block;
                const std::size_t hi = std::min(rows, lo + block);
                const double inv = 1.0 / static_cast<double>(hi - lo);
                for (std::size_t r = lo; r < hi; ++r)
                    for (std::size_t j = 0; j < cols; ++j)
                        ga.data[r * cols + j] += inv * g.data[i * cols + j];
            }
        });
        return o;
    }

    // ---- convolution / pooling (channel-first {C,H,W}) ----

    Var conv2d_same(Var x, Var w, Var b) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        const Tensor& tb = val(b);
        if (tx.rank() != 3 || tw.rank() != 4 || tb.rank() != 1 || tw.dim(1) != tx.dim(0) ||
            tw.dim(0) != tb.dim(0)) {
            throw ContractError("conv2d: shape mismatch");
        }
        const std::size_t cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
        const std::size_t cout = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
        const std::size_t ph = kh / 2, pw = kw / 2;

        Tensor out({cout, h, wd});
        for (std::size_t oc = 0; oc < cout; ++oc) {
            const double bias = tb.data[oc];
            double* oplane = &out.data[oc * h * wd];
            for (std::size_t i = 0; i < h * wd; ++i) oplane[i] = bias;
            for (std::size_t ic = 0; ic < cin; ++ic) {
                const double* iplane = &tx.data[ic * h * wd];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double wv = tw(oc, ic, ky, kx);
                        if (wv == 0.0) continue;
                        // output position (y,x) reads input (y+ky-ph, x+kx-pw)
                        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) -
                                                  static_cast<std::ptrdiff_t>(ph);
                        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) -
                                                  static_cast<std::ptrdiff_t>(pw);
                        const std::size_t y_lo = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                        const std::size_t y_hi =
                            dy > 0 ? h - static_cast<std::size_t>(dy) : h;
                        const std::size_t x_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                        const std::size_t x_hi =
                            dx > 0 ? wd - static_cast<std::size_t>(dx) : wd;
                        for (std::size_t y = y_lo; y < y_hi; ++y) {
                            double* orow = oplane + y * wd;
                            const double* irow =
                                iplane +
                                static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy) * wd;
                            for (std::size_t xp = x_lo; xp < x_hi; ++xp) {
                                orow[xp] += wv * irow[static_cast<std::size_t>(
                                                 static_cast<std::ptrdiff_t>(xp) + dx)];
                            }
                        }
                    }
                }
            }
        }
        const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
        Var o = push(std::move(out), rg, nullptr);
        set_back(o, [this, x, w, b, o, cin, cout, h, wd, kh, kw, ph, pw] {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& tx = nodes_[x.id].value;
            const Tensor& tw = nodes_[w.id].value;
            if (nodes_[b.id].requires_grad) {
                Tensor& gb = nodes_[b.id].grad;
                for (std::size_t oc = 0; oc < cout; ++oc) {
                    const double* gplane = &g.data[oc * h * wd];
                    double acc = 0.0;
                    for (std::size_t i = 0; i < h * wd; ++i) acc += gplane[i];
                    gb.data[oc] += acc;
                }
            }
            const bool need_x = nodes_[x.id].requires_grad;
            const bool need_w = nodes_[w.id].requires_grad;
            if (!need_x && !need_w) return;
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const double* gplane = &g.data[oc * h * wd];
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    const double* iplane = &tx.data[ic * h * wd];
                    double* gx_plane = need_x ? &nodes_[x.id].grad.data[ic * h * wd] : nullptr;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const double wv = tw(oc, ic, ky, kx);
                            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) -
                                                      static_cast<std::ptrdiff_t>(ph);
                            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) -
                                                      static_cast<std::ptrdiff_t>(pw);
                            const std::size_t y_lo = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                            const std::size_t y_hi = dy > 0 ? h - static_cast<std::size_t>(dy) : h;
                            const std::size_t x_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                            const std::size_t x_hi = dx > 0 ? wd - static_cast<std::size_t>(dx) : wd;
                            double wacc = 0.0;
                            for (std::size_t y = y_lo; y < y_hi; ++y) {
                                const double* grow = gplane + y * wd;
                                const std::size_t iy =
                                    static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy);
                                const double* irow = iplane + iy * wd;
                                double* gxrow = need_x ? gx_plane + iy * wd : nullptr;
                                for (std::size_t xp = x_lo; xp < x_hi; ++xp) {
                                    const std::size_t ix = static_cast<std::size_t>(
                                        static_cast<std::ptrdiff_t>(xp) + dx);
                                    wacc += grow[xp] * irow[ix];
                                    if (need_x) gxrow[ix] += wv * grow[xp];
                                }
                            }
                            if (need_w) nodes_[w.id].grad(oc, ic, ky, kx) += wacc;
                        }
                    }
                }
            }
        });
        return o;
    }

    // adaptive average pooling {C,H,W} -> {C,oh,ow}; region boundaries follow
    // the floor/ceil convention so cells tile the input exactly
    Var adaptive_avg_pool(Var x, std::size_t oh, std::size_t ow) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3 || oh == 0 || ow == 0) throw ContractError("adaptive_avg_pool: bad args");
        const std::size_t c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
        auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
        auto hi = [](std::size_t i, std::size_t in, std::size_t out) {
            return ((i + 1) * in + out - 1) / out;
        };
        Tensor out({c, oh, ow});
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < oh; ++i) {
                const std::size_t y0 = lo(i, h, oh), y1 = hi(i, h, oh);
                for (std::size_t j = 0; j < ow; ++j) {
                    const std::size_t x0 = lo(j, w, ow), x1 = hi(j, w, ow);
                    double acc = 0.0;
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xp = x0; xp < x1; ++xp) acc += tx(ch, y, xp);
                    out(ch, i, j) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
                }
            }
        }
        Var o = push(std::move(out), requires_grad(x), nullptr);
        set_back(o, [this, x, o, c, h, w, oh, ow, lo, hi] {
            if (!nodes_[x.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& gx = nodes_[x.id].grad;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t i = 0; i < oh; ++i) {
                    const std::size_t y0 = lo(i, h, oh), y1 = hi(i, h, oh);
                    for (std::size_t j = 0; j < ow; ++j) {
                        const std::size_t x0 = lo(j, w, ow), x1 = hi(j, w, ow);
                        const double share =
                            g(ch, i, j) / static_cast<double>((y1 - y0) * (x1 - x0));
                        for (std::size_t y = y0; y < y1; ++y)
                            for (std::size_t xp = x0; xp < x1; ++xp)
                                gx.data[(ch * h + y) * w + xp] += share;
                    }
                }
            }
        });
        return o;
    }

    // inverted dropout; identity when inactive
    Var dropout(Var a, double p, Rng& rng, bool active) {
        if (!active || p <= 0.0) return a;
        if (p >= 1.0) throw ConfigError("dropout: p must be < 1");
        const Tensor& ta = val(a);
        Tensor mask(ta.shape);
        const double keep = 1.0 / (1.0 - p);
        for (double& m : mask.data) m = rng.uniform() < p ? 0.0 : keep;
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask.data[i];
        Var o = push(std::move(out), requires_grad(a), nullptr);
        set_back(o, [this, a, o, mask = std::move(mask)] {
            if (!nodes_[a.id].requires_grad) return;
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = nodes_[a.id].grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * mask.data[i];
        });
        return o;
    }

    // ---- losses ----

    // mean binary cross entropy against 0/1 targets; scores clamped to
    // [eps, 1-eps] to keep the value finite
    Var bce_mean(Var scores, std::vector<double> targets, double eps = 1e-7) {
        const Tensor& ts = val(scores);
        if (ts.size() != targets.size()) throw ContractError("bce_mean: length mismatch");
        if (ts.size() == 0) throw ContractError("bce_mean: empty input");
        const double n = static_cast<double>(ts.size());
        double loss = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const double s = std::min(std::max(ts.data[i], eps), 1.0 - eps);
            loss -= targets[i] * std::log(s) + (1.0 - targets[i]) * std::log(1.0 - s);
        }
        Var o = push(Tensor::scalar(loss / n), requires_grad(scores), nullptr);
        set_back(o, [this, scores, o, targets = std::move(targets), eps, n] {
            if (!nodes_[scores.id].requires_grad) return;
            const double g = nodes_[o.id].grad.data[0];
            const Tensor& ts = nodes_[scores.id].value;
            Tensor& gs = nodes_[scores.id].grad;
            for (std::size_t i = 0; i < ts.size(); ++i) {
                const double s = ts.data[i];
                if (s < eps || s > 1.0 - eps) continue;  // clamped: flat
                gs.data[i] += g * (-targets[i] / s + (1.0 - targets[i]) / (1.0 - s)) / n;
            }
        });
        return o;
    }

    // mean negative log-likelihood over masked-in positions of a {T,V}
    // log-probability matrix
    Var nll_masked(Var logp, std::vector<int> targets, std::vector<char> mask) {
        const Tensor& tl = val(logp);
        if (tl.rank() != 2 || targets.size() != tl.dim(0) || mask.size() != tl.dim(0)) {
            throw ContractError("nll_masked: shape mismatch");
        }
        const std::size_t cols = tl.dim(1);
        std::size_t n_in = 0;
        double loss = 0.0;
        for (std::size_t t = 0; t < targets.size(); ++t) {
            if (!mask[t]) continue;
            const auto tgt = static_cast<std::size_t>(targets[t]);
            if (targets[t] < 0 || tgt >= cols) throw ContractError("nll_masked: target out of range");
            loss -= tl(t, tgt);
            ++n_in;
        }
        if (n_in == 0) throw ContractError("nll_masked: no masked-in positions");
        const double inv = 1.0 / static_cast<double>(n_in);
        Var o = push(Tensor::scalar(loss * inv), requires_grad(logp), nullptr);
        set_back(o, [this, logp, o, targets = std::move(targets), mask = std::move(mask), cols,
                     inv] {
            if (!nodes_[logp.id].requires_grad) return;
            const double g = nodes_[o.id].grad.data[0];
            Tensor& gl = nodes_[logp.id].grad;
            for (std::size_t t = 0; t < targets.size(); ++t) {
                if (!mask[t]) continue;
                gl.data[t * cols + static_cast<std::size_t>(targets[t])] -= g * inv;
            }
        });
        return o;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        bool requires_grad = false;
    };

    Node& node(Var v) {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw ContractError("tape: invalid var");
        }
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

    Var push(Tensor value, bool requires_grad, std::function<void()> back) {
        Node n;
        if (requires_grad) n.grad = Tensor::zeros(value.shape);
        n.value = std::move(value);
        n.back = std::move(back);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var v, std::function<void()> back) {
        if (node(v).requires_grad) node(v).back = std::move(back);
    }

    void accumulate_identity(Var input, Var out) {
        if (!nodes_[input.id].requires_grad) return;
        const Tensor& g = nodes_[out.id].grad;
        Tensor& gi = nodes_[input.id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gi.data[i] += g.data[i];
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Named parameter storage + tape binding
// ---------------------------------------------------------------------------

// Ordered name -> tensor map; order is creation order and drives optimizer
// updates, serialization, and initialization determinism.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("params: duplicate name " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("params: unknown name " + name);
        return items_[it->second].second;
    }
    const Tensor& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    std::size_t count() const { return items_.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Lazily leafs store tensors onto a tape, one leaf per parameter per tape,
// and hands gradients back after backward().
class TapeParams {
public:
    TapeParams(Tape& tape, ParamStore& store, bool trainable = true)
        : tape_(tape), store_(store), trainable_(trainable) {}

    Var operator[](const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var v = tape_.leaf(store_.at(name), trainable_);
        bound_[name] = v;
        return v;
    }

    // (name, gradient) pairs for every parameter touched by the forward pass
    std::vector<std::pair<std::string, const Tensor*>> gradients() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        out.reserve(bound_.size());
        for (const auto& [name, t] : store_) {
            auto it = bound_.find(name);
            if (it != bound_.end()) out.emplace_back(name, &tape_.grad(it->second));
        }
        return out;
    }

    Tape& tape() { return tape_; }
    ParamStore& store() { return store_; }

private:
    Tape& tape_;
    ParamStore& store_;
    bool trainable_;
    std::unordered_map<std::string, Var> bound_;
};

}  // namespace speechre::ad
