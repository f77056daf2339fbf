#pragma once

// Reverse-mode tape over Matrix values. The transformer forward is written
// once against this interface (see backbone.hpp) and reused for inference and
// for training gradients, so the differentiated path and the inference path
// cannot drift apart. Backward closures reference nodes by index; calling
// order is creation order, so reverse iteration is a valid topological sweep.

#include <cmath>
#include <functional>
#include <vector>

#include "metasoft/numerics.hpp"

namespace metasoft {

class Tape {
   public:
    using handle = int;

    handle leaf(Matrix v) {
        nodes_.push_back(Node{std::move(v), {}, nullptr});
        return static_cast<handle>(nodes_.size() - 1);
    }

    const Matrix& val(handle h) const { return nodes_[h].value; }
    const Matrix& grad(handle h) const { return nodes_[h].grad; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    handle add(handle a, handle b) {
        handle out = leaf(metasoft::add(val(a), val(b)));
        nodes_[out].backward = [a, b, out](Tape& t) {
            t.accumulate(a, t.nodes_[out].grad);
            t.accumulate(b, t.nodes_[out].grad);
        };
        return out;
    }

    handle sub(handle a, handle b) {
        handle out = leaf(metasoft::sub(val(a), val(b)));
        nodes_[out].backward = [a, b, out](Tape& t) {
            t.accumulate(a, t.nodes_[out].grad);
            t.accumulate(b, metasoft::scale(t.nodes_[out].grad, -1.0));
        };
        return out;
    }

    handle scale(handle a, double s) {
        handle out = leaf(metasoft::scale(val(a), s));
        nodes_[out].backward = [a, s, out](Tape& t) {
            t.accumulate(a, metasoft::scale(t.nodes_[out].grad, s));
        };
        return out;
    }

    handle add_const(handle a, const Matrix& c) {
        handle out = leaf(metasoft::add(val(a), c));
        nodes_[out].backward = [a, out](Tape& t) { t.accumulate(a, t.nodes_[out].grad); };
        return out;
    }

    handle hadamard(handle a, handle b) {
        handle out = leaf(metasoft::hadamard(val(a), val(b)));
        nodes_[out].backward = [a, b, out](Tape& t) {
            t.accumulate(a, metasoft::hadamard(t.nodes_[out].grad, t.val(b)));
            t.accumulate(b, metasoft::hadamard(t.nodes_[out].grad, t.val(a)));
        };
        return out;
    }

    handle matmul(handle a, handle b) {
        handle out = leaf(metasoft::matmul(val(a), val(b)));
        nodes_[out].backward = [a, b, out](Tape& t) {
            const Matrix& g = t.nodes_[out].grad;
            t.accumulate(a, metasoft::matmul_nt(g, t.val(b)));
            t.accumulate(b, metasoft::matmul_tn(t.val(a), g));
        };
        return out;
    }

    // out = a * B with a constant right operand (frozen weights / cached
    // prompt tensors); only a receives gradient.
    handle matmul_constb(handle a, const Matrix& b) {
        handle out = leaf(metasoft::matmul(val(a), b));
        nodes_[out].backward = [a, b, out](Tape& t) {
            t.accumulate(a, metasoft::matmul_nt(t.nodes_[out].grad, b));
        };
        return out;
    }

    // out = a * B^T with a constant right operand.
    handle matmul_nt_constb(handle a, const Matrix& b) {
        handle out = leaf(metasoft::matmul_nt(val(a), b));
        nodes_[out].backward = [a, b, out](Tape& t) {
            t.accumulate(a, metasoft::matmul(t.nodes_[out].grad, b));
        };
        return out;
    }

    // out = a * b^T
    handle matmul_nt(handle a, handle b) {
        handle out = leaf(metasoft::matmul_nt(val(a), val(b)));
        nodes_[out].backward = [a, b, out](Tape& t) {
            const Matrix& g = t.nodes_[out].grad;
            t.accumulate(a, metasoft::matmul(g, t.val(b)));
            t.accumulate(b, matmul_tn(g, t.val(a)));
        };
        return out;
    }

    handle gather_rows(handle a, std::vector<std::size_t> idx) {
        const Matrix& v = val(a);
        Matrix out(idx.size(), v.cols);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(v.row_ptr(idx[i]), v.cols, out.row_ptr(i));
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, idx = std::move(idx), h](Tape& t) {
            Matrix g(t.val(a).rows, t.val(a).cols);
            const Matrix& og = t.nodes_[h].grad;
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < g.cols; ++j) g.at(idx[i], j) += og.at(i, j);
            t.accumulate(a, g);
        };
        return h;
    }

    handle slice_rows(handle a, std::size_t r0, std::size_t n) {
        const Matrix& v = val(a);
        Matrix out(n, v.cols);
        std::copy_n(v.row_ptr(r0), n * v.cols, out.data.data());
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, r0, n, h](Tape& t) {
            Matrix g(t.val(a).rows, t.val(a).cols);
            std::copy_n(t.nodes_[h].grad.data.data(), n * g.cols, g.row_ptr(r0));
            t.accumulate(a, g);
        };
        return h;
    }

    handle slice_cols(handle a, std::size_t c0, std::size_t n) {
        const Matrix& v = val(a);
        Matrix out(v.rows, n);
        for (std::size_t i = 0; i < v.rows; ++i) std::copy_n(v.row_ptr(i) + c0, n, out.row_ptr(i));
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, c0, n, h](Tape& t) {
            Matrix g(t.val(a).rows, t.val(a).cols);
            const Matrix& og = t.nodes_[h].grad;
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < n; ++j) g.at(i, c0 + j) += og.at(i, j);
            t.accumulate(a, g);
        };
        return h;
    }

    handle concat_cols(const std::vector<handle>& parts) {
        std::size_t rows = val(parts[0]).rows, cols = 0;
        for (handle p : parts) cols += val(p).cols;
        Matrix out(rows, cols);
        std::size_t c0 = 0;
        for (handle p : parts) {
            const Matrix& v = val(p);
            for (std::size_t i = 0; i < rows; ++i)
                std::copy_n(v.row_ptr(i), v.cols, out.row_ptr(i) + c0);
            c0 += v.cols;
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [parts, h](Tape& t) {
            const Matrix& og = t.nodes_[h].grad;
            std::size_t c0 = 0;
            for (handle p : parts) {
                const Matrix& v = t.val(p);
                Matrix g(v.rows, v.cols);
                for (std::size_t i = 0; i < v.rows; ++i)
                    std::copy_n(og.row_ptr(i) + c0, v.cols, g.row_ptr(i));
                t.accumulate(p, g);
                c0 += v.cols;
            }
        };
        return h;
    }

    handle concat_rows(const std::vector<handle>& parts) {
        std::size_t cols = val(parts[0]).cols, rows = 0;
        for (handle p : parts) rows += val(p).rows;
        Matrix out(rows, cols);
        std::size_t r0 = 0;
        for (handle p : parts) {
            const Matrix& v = val(p);
            std::copy_n(v.data.data(), v.size(), out.row_ptr(r0));
            r0 += v.rows;
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [parts, h](Tape& t) {
            const Matrix& og = t.nodes_[h].grad;
            std::size_t r0 = 0;
            for (handle p : parts) {
                const Matrix& v = t.val(p);
                Matrix g(v.rows, v.cols);
                std::copy_n(og.row_ptr(r0), v.size(), g.data.data());
                t.accumulate(p, g);
                r0 += v.rows;
            }
        };
        return h;
    }

    // Parameter-free RMS normalization per row: y = x / sqrt(mean(x^2) + eps).
    handle rmsnorm_rows(handle a) {
        const Matrix& x = val(a);
        const double eps = 1e-8;
        Matrix out(x.rows, x.cols);
        std::vector<double> inv_rms(x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) {
            double ms = 0.0;
            for (std::size_t j = 0; j < x.cols; ++j) ms += x.at(i, j) * x.at(i, j);
            ms = ms / static_cast<double>(x.cols) + eps;
            inv_rms[i] = 1.0 / std::sqrt(ms);
            for (std::size_t j = 0; j < x.cols; ++j) out.at(i, j) = x.at(i, j) * inv_rms[i];
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, inv_rms = std::move(inv_rms), h](Tape& t) {
            const Matrix& x = t.val(a);
            const Matrix& og = t.nodes_[h].grad;
            Matrix g(x.rows, x.cols);
            const double n = static_cast<double>(x.cols);
            for (std::size_t i = 0; i < x.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < x.cols; ++j) dot += og.at(i, j) * x.at(i, j);
                const double r = inv_rms[i];
                const double k = dot * r * r * r / n;
                for (std::size_t j = 0; j < x.cols; ++j)
                    g.at(i, j) = og.at(i, j) * r - x.at(i, j) * k;
            }
            t.accumulate(a, g);
        };
        return h;
    }

    handle gelu(handle a) {
        Matrix out = val(a);
        for (double& v : out.data) v = gelu_scalar(v);
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, h](Tape& t) {
            const Matrix& x = t.val(a);
            Matrix g = t.nodes_[h].grad;
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= gelu_grad_scalar(x.data[i]);
            t.accumulate(a, g);
        };
        return h;
    }

    // Causal softmax over a square score matrix: row i normalizes columns
    // 0..i and zeroes the rest.
    handle causal_softmax(handle a) {
        const Matrix& x = val(a);
        if (x.rows != x.cols) throw ShapeError("causal_softmax: square scores expected");
        Matrix out(x.rows, x.cols);
        for (std::size_t i = 0; i < x.rows; ++i) {
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, x.at(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                out.at(i, j) = std::exp(x.at(i, j) - mx);
                sum += out.at(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) out.at(i, j) /= sum;
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, h](Tape& t) {
            const Matrix& y = t.val(h);
            const Matrix& og = t.nodes_[h].grad;
            Matrix g(y.rows, y.cols);
            for (std::size_t i = 0; i < y.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += og.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j <= i; ++j)
                    g.at(i, j) = y.at(i, j) * (og.at(i, j) - dot);
            }
            t.accumulate(a, g);
        };
        return h;
    }

    // Softmax where row i normalizes columns 0..offset+i (rows appended
    // after `offset` existing positions, causal among themselves).
    handle offset_causal_softmax(handle a, std::size_t offset) {
        const Matrix& x = val(a);
        Matrix out(x.rows, x.cols);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const std::size_t lim = std::min(x.cols, offset + i + 1);
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, x.at(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j < lim; ++j) {
                out.at(i, j) = std::exp(x.at(i, j) - mx);
                sum += out.at(i, j);
            }
            for (std::size_t j = 0; j < lim; ++j) out.at(i, j) /= sum;
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, offset, h](Tape& t) {
            const Matrix& y = t.val(h);
            const Matrix& og = t.nodes_[h].grad;
            Matrix g(y.rows, y.cols);
            for (std::size_t i = 0; i < y.rows; ++i) {
                const std::size_t lim = std::min(y.cols, offset + i + 1);
                double dot = 0.0;
                for (std::size_t j = 0; j < lim; ++j) dot += og.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < lim; ++j)
                    g.at(i, j) = y.at(i, j) * (og.at(i, j) - dot);
            }
            t.accumulate(a, g);
        };
        return h;
    }

    handle softmax_rows(handle a, double temperature) {
        handle h = leaf(metasoft::softmax_rows(val(a), temperature));
        nodes_[h].backward = [a, temperature, h](Tape& t) {
            const Matrix& y = t.val(h);
            const Matrix& og = t.nodes_[h].grad;
            Matrix g(y.rows, y.cols);
            for (std::size_t i = 0; i < y.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols; ++j) dot += og.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < y.cols; ++j)
                    g.at(i, j) = y.at(i, j) * (og.at(i, j) - dot) / temperature;
            }
            t.accumulate(a, g);
        };
        return h;
    }

    // y = x / rowsum(x); rows must have nonzero sums.
    handle normalize_rows(handle a) {
        const Matrix& x = val(a);
        Matrix out(x.rows, x.cols);
        std::vector<double> inv_sum(x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < x.cols; ++j) s += x.at(i, j);
            inv_sum[i] = 1.0 / s;
            for (std::size_t j = 0; j < x.cols; ++j) out.at(i, j) = x.at(i, j) * inv_sum[i];
        }
        handle h = leaf(std::move(out));
        nodes_[h].backward = [a, inv_sum = std::move(inv_sum), h](Tape& t) {
            const Matrix& y = t.val(h);
            const Matrix& og = t.nodes_[h].grad;
            Matrix g(y.rows, y.cols);
            for (std::size_t i = 0; i < y.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < y.cols; ++j) dot += og.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < y.cols; ++j)
                    g.at(i, j) = (og.at(i, j) - dot) * inv_sum[i];
            }
            t.accumulate(a, g);
        };
        return h;
    }

    handle reshape(handle a, std::size_t r, std::size_t c) {
        const Matrix& v = val(a);
        if (v.size() != r * c) throw ShapeError("reshape: element count mismatch");
        handle h = leaf(Matrix(r, c, v.data));
        nodes_[h].backward = [a, h](Tape& t) {
            const Matrix& og = t.nodes_[h].grad;
            t.accumulate(a, Matrix(t.val(a).rows, t.val(a).cols, og.data));
        };
        return h;
    }

    // Scalar (1x1): mean squared difference against a fixed target.
    handle mse_against(handle a, const Matrix& target) {
        const Matrix& x = val(a);
        if (!x.same_shape(target)) throw ShapeError("mse_against: shape mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = x.data[i] - target.data[i];
            acc += d * d;
        }
        const double inv_n = 1.0 / static_cast<double>(x.size());
        handle h = leaf(Matrix(1, 1, {acc * inv_n}));
        nodes_[h].backward = [a, target, inv_n, h](Tape& t) {
            const double gs = t.nodes_[h].grad.at(0, 0);
            Matrix g(target.rows, target.cols);
            const Matrix& x = t.val(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] = gs * 2.0 * (x.data[i] - target.data[i]) * inv_n;
            t.accumulate(a, g);
        };
        return h;
    }

    // Scalar: ||L L^T - I||_F^2. Gradient is 4 (L L^T - I) L.
    handle gram_identity_penalty(handle a) {
        const Matrix& l = val(a);
        Matrix gram = metasoft::matmul_nt(l, l);
        for (std::size_t i = 0; i < gram.rows; ++i) gram.at(i, i) -= 1.0;
        double acc = 0.0;
        for (double v : gram.data) acc += v * v;
        handle h = leaf(Matrix(1, 1, {acc}));
        nodes_[h].backward = [a, gram = std::move(gram), h](Tape& t) {
            const double gs = t.nodes_[h].grad.at(0, 0);
            t.accumulate(a, metasoft::scale(metasoft::matmul(gram, t.val(a)), 4.0 * gs));
        };
        return h;
    }

    // Scalar: mean cross-entropy of targets[i] under softmax(logits[row0+i]).
    handle cross_entropy_rows(handle logits, const std::vector<int>& targets, std::size_t row0) {
        const Matrix& x = val(logits);
        const std::size_t n = targets.size();
        Matrix probs(n, x.cols);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.row_ptr(row0 + i);
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < x.cols; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < x.cols; ++j) {
                probs.at(i, j) = std::exp(row[j] - mx);
                sum += probs.at(i, j);
            }
            for (std::size_t j = 0; j < x.cols; ++j) probs.at(i, j) /= sum;
            acc -= std::log(std::max(probs.at(i, targets[i]), 1e-300));
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        handle h = leaf(Matrix(1, 1, {acc * inv_n}));
        nodes_[h].backward = [logits, targets, row0, probs = std::move(probs), inv_n, h](Tape& t) {
            const double gs = t.nodes_[h].grad.at(0, 0);
            const Matrix& x = t.val(logits);
            Matrix g(x.rows, x.cols);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                for (std::size_t j = 0; j < x.cols; ++j)
                    g.at(row0 + i, j) = gs * probs.at(i, j) * inv_n;
                g.at(row0 + i, targets[i]) -= gs * inv_n;
            }
            t.accumulate(logits, g);
        };
        return h;
    }

    // Runs reverse accumulation from a 1x1 root. Grads of every node are
    // (re)initialized to zero first.
    void backward(handle root) {
        if (val(root).size() != 1) throw ShapeError("backward: root must be scalar");
        for (auto& n : nodes_) {
            n.grad = Matrix(n.value.rows, n.value.cols);
        }
        nodes_[root].grad.at(0, 0) = 1.0;
        for (int i = root; i >= 0; --i) {
            if (nodes_[i].backward) nodes_[i].backward(*this);
        }
    }

   private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&)> backward;
    };

    void accumulate(handle h, const Matrix& g) {
        Matrix& dst = nodes_[h].grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
    }

    std::vector<Node> nodes_;
};

}  // namespace metasoft
