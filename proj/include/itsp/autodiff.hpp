#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "itsp/errors.hpp"
#include "itsp/matrix.hpp"
#include "itsp/rng.hpp"

namespace itsp {

// Named trainable tensors. Order of registration is the canonical order for
// checkpoints and optimizer state.
template <class T>
struct ParamStore {
    struct Entry {
        std::string name;
        Mat<T> w;
    };
    std::vector<Entry> entries;

    int add(std::string name, Mat<T> w) {
        entries.push_back({std::move(name), std::move(w)});
        return static_cast<int>(entries.size()) - 1;
    }
    Mat<T>& operator[](int i) { return entries[i].w; }
    const Mat<T>& operator[](int i) const { return entries[i].w; }
    int count() const { return static_cast<int>(entries.size()); }

    std::vector<Mat<T>> make_grad_buffer() const {
        std::vector<Mat<T>> g;
        g.reserve(entries.size());
        for (const auto& e : entries) g.emplace_back(e.w.rows, e.w.cols);
        return g;
    }
};

// Reverse-mode tape over Mat<T>. One tape per forward pass; backward() walks
// the nodes in reverse. Parameter leaves accumulate into an external gradient
// buffer so several tapes can feed one optimizer step.
template <class T>
class Tape {
public:
    Tape(const ParamStore<T>* params = nullptr, std::vector<Mat<T>>* grad_buffer = nullptr)
        : params_(params), grads_(grad_buffer) {}

    // ---- leaves ----

    int leaf(Mat<T> v) {
        nodes_.push_back(Node{std::move(v), nullptr, {}, {}, false});
        return last();
    }

    // Borrows v; caller keeps it alive for the tape's lifetime.
    int leaf_ref(const Mat<T>* v) {
        nodes_.push_back(Node{{}, v, {}, {}, false});
        return last();
    }

    // Borrowed leaf whose gradient is tracked (for probes and injections).
    int input(const Mat<T>* v) {
        nodes_.push_back(Node{{}, v, {}, {}, true});
        return last();
    }

    int param(int pid) {
        const Mat<T>* w = &(*params_)[pid];
        nodes_.push_back(Node{{}, w, {}, {}, true});
        int id = last();
        nodes_[id].back = [this, id, pid] {
            if (grads_ == nullptr) return;
            Mat<T>& g = (*grads_)[pid];
            const Mat<T>& ng = nodes_[id].grad;
            for (std::size_t i = 0; i < g.size(); ++i) g.a[i] += ng.a[i];
        };
        return id;
    }

    // ---- ops ----

    int matmul(int a, int b) {
        int id = alloc(itsp::matmul(val(a), val(b)));
        nodes_[id].back = [this, id, a, b] {
            const Mat<T>& g = nodes_[id].grad;
            if (wants(a)) matmul_nt_acc(g, val(b), grad(a));
            if (wants(b)) matmul_tn_acc(val(a), g, grad(b));
        };
        return id;
    }

    // A * B^T
    int matmul_nt(int a, int b) {
        Mat<T> out(val(a).rows, val(b).rows);
        matmul_nt_acc(val(a), val(b), out);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, b] {
            const Mat<T>& g = nodes_[id].grad;
            if (wants(a)) matmul_acc(g, val(b), grad(a));
            if (wants(b)) matmul_tn_acc(g, val(a), grad(b));
        };
        return id;
    }

    int add(int a, int b) {
        const Mat<T>& va = val(a);
        const Mat<T>& vb = val(b);
        Mat<T> out = va;
        for (std::size_t i = 0; i < out.size(); ++i) out.a[i] += vb.a[i];
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, b] {
            const Mat<T>& g = nodes_[id].grad;
            if (wants(a)) acc(grad(a), g);
            if (wants(b)) acc(grad(b), g);
        };
        return id;
    }

    // a: r x c, bias: 1 x c, broadcast over rows
    int add_row_broadcast(int a, int bias) {
        const Mat<T>& va = val(a);
        const Mat<T>& vb = val(bias);
        Mat<T> out = va;
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) out.at(i, j) += vb.at(0, j);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, bias] {
            const Mat<T>& g = nodes_[id].grad;
            if (wants(a)) acc(grad(a), g);
            if (wants(bias)) {
                Mat<T>& gb = grad(bias);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
            }
        };
        return id;
    }

    int scale(int a, T s) {
        Mat<T> out = val(a);
        for (auto& x : out.a) x *= s;
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, s] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += s * g.a[i];
        };
        return id;
    }

    int relu(int a) {
        Mat<T> out = val(a);
        for (auto& x : out.a)
            if (x < T(0)) x = T(0);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            const Mat<T>& v = val(a);
            Mat<T>& ga = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (v.a[i] > T(0)) ga.a[i] += g.a[i];
        };
        return id;
    }

    int softmax_rows(int a) {
        Mat<T> out = val(a);
        softmax_inplace(out);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a] {
            if (!wants(a)) return;
            const Mat<T>& y = nodes_[id].val();
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (int i = 0; i < y.rows; ++i) {
                T dot = T(0);
                for (int j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                for (int j = 0; j < y.cols; ++j)
                    ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        };
        return id;
    }

    int log_softmax_rows(int a) {
        const Mat<T>& v = val(a);
        Mat<T> out(v.rows, v.cols);
        for (int i = 0; i < v.rows; ++i) {
            T mx = v.at(i, 0);
            for (int j = 1; j < v.cols; ++j) mx = std::max(mx, v.at(i, j));
            T z = T(0);
            for (int j = 0; j < v.cols; ++j) z += std::exp(v.at(i, j) - mx);
            const T logz = std::log(z) + mx;
            for (int j = 0; j < v.cols; ++j) out.at(i, j) = v.at(i, j) - logz;
        }
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a] {
            if (!wants(a)) return;
            const Mat<T>& y = nodes_[id].val();
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (int i = 0; i < y.rows; ++i) {
                T gsum = T(0);
                for (int j = 0; j < y.cols; ++j) gsum += g.at(i, j);
                for (int j = 0; j < y.cols; ++j)
                    ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gsum;
            }
        };
        return id;
    }

    // Row-wise layer norm with 1 x c gain and bias.
    int layer_norm(int x, int gain, int bias) {
        const Mat<T>& v = val(x);
        const Mat<T>& gn = val(gain);
        const Mat<T>& bs = val(bias);
        const T eps = T(1e-5);
        Mat<T> out(v.rows, v.cols);
        Mat<T> xhat(v.rows, v.cols);
        std::vector<T> inv_sigma(v.rows);
        const int c = v.cols;
        for (int i = 0; i < v.rows; ++i) {
            T mu = T(0);
            for (int j = 0; j < c; ++j) mu += v.at(i, j);
            mu /= static_cast<T>(c);
            T var = T(0);
            for (int j = 0; j < c; ++j) {
                const T d = v.at(i, j) - mu;
                var += d * d;
            }
            var /= static_cast<T>(c);
            const T is = T(1) / std::sqrt(var + eps);
            inv_sigma[i] = is;
            for (int j = 0; j < c; ++j) {
                const T xh = (v.at(i, j) - mu) * is;
                xhat.at(i, j) = xh;
                out.at(i, j) = xh * gn.at(0, j) + bs.at(0, j);
            }
        }
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, x, gain, bias, xhat = std::move(xhat),
                           inv_sigma = std::move(inv_sigma)] {
            const Mat<T>& g = nodes_[id].grad;
            const Mat<T>& gn = val(gain);
            const int c = g.cols;
            const bool wg = wants(gain);
            const bool wb = wants(bias);
            if (wg || wb) {
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < c; ++j) {
                        if (wg) grad(gain).at(0, j) += g.at(i, j) * xhat.at(i, j);
                        if (wb) grad(bias).at(0, j) += g.at(i, j);
                    }
            }
            if (!wants(x)) return;
            Mat<T>& gx = grad(x);
            for (int i = 0; i < g.rows; ++i) {
                T s1 = T(0), s2 = T(0);
                for (int j = 0; j < c; ++j) {
                    const T dy = g.at(i, j) * gn.at(0, j);
                    s1 += dy;
                    s2 += dy * xhat.at(i, j);
                }
                s1 /= static_cast<T>(c);
                s2 /= static_cast<T>(c);
                for (int j = 0; j < c; ++j) {
                    const T dy = g.at(i, j) * gn.at(0, j);
                    gx.at(i, j) += (dy - s1 - xhat.at(i, j) * s2) * inv_sigma[i];
                }
            }
        };
        return id;
    }

    int concat_cols(int a, int b) {
        const Mat<T>& va = val(a);
        const Mat<T>& vb = val(b);
        Mat<T> out(va.rows, va.cols + vb.cols);
        for (int i = 0; i < va.rows; ++i) {
            for (int j = 0; j < va.cols; ++j) out.at(i, j) = va.at(i, j);
            for (int j = 0; j < vb.cols; ++j) out.at(i, va.cols + j) = vb.at(i, j);
        }
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, b] {
            const Mat<T>& g = nodes_[id].grad;
            const int ca = val(a).cols;
            const int cb = val(b).cols;
            for (int i = 0; i < g.rows; ++i) {
                if (wants(a))
                    for (int j = 0; j < ca; ++j) grad(a).at(i, j) += g.at(i, j);
                if (wants(b))
                    for (int j = 0; j < cb; ++j) grad(b).at(i, j) += g.at(i, ca + j);
            }
        };
        return id;
    }

    int slice_rows(int a, int r0, int r1) {
        const Mat<T>& v = val(a);
        Mat<T> out(r1 - r0, v.cols);
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < v.cols; ++j) out.at(i - r0, j) = v.at(i, j);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, r0] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) ga.at(r0 + i, j) += g.at(i, j);
        };
        return id;
    }

    int slice_cols(int a, int c0, int c1) {
        const Mat<T>& v = val(a);
        Mat<T> out(v.rows, c1 - c0);
        for (int i = 0; i < v.rows; ++i)
            for (int j = c0; j < c1; ++j) out.at(i, j - c0) = v.at(i, j);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, c0] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) ga.at(i, c0 + j) += g.at(i, j);
        };
        return id;
    }

    int gather_rows(int a, std::vector<int> rows) {
        const Mat<T>& v = val(a);
        Mat<T> out(static_cast<int>(rows.size()), v.cols);
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < v.cols; ++j) out.at(i, j) = v.at(rows[i], j);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, rows = std::move(rows)] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) ga.at(rows[i], j) += g.at(i, j);
        };
        return id;
    }

    // Builds a matrix whose row i is row picks[i].second of node picks[i].first.
    int assemble_rows(std::vector<std::pair<int, int>> picks) {
        const int c = val(picks.front().first).cols;
        Mat<T> out(static_cast<int>(picks.size()), c);
        for (int i = 0; i < out.rows; ++i) {
            const Mat<T>& src = val(picks[i].first);
            for (int j = 0; j < c; ++j) out.at(i, j) = src.at(picks[i].second, j);
        }
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, picks = std::move(picks)] {
            const Mat<T>& g = nodes_[id].grad;
            for (int i = 0; i < g.rows; ++i) {
                const auto [src, row] = picks[i];
                if (!wants(src)) continue;
                Mat<T>& gs = grad(src);
                for (int j = 0; j < g.cols; ++j) gs.at(row, j) += g.at(i, j);
            }
        };
        return id;
    }

    // Inverted dropout; identity when not training.
    int dropout(int a, T rate, Rng& rng, bool training) {
        if (!training || rate <= T(0)) return a;
        const Mat<T>& v = val(a);
        std::vector<char> keep(v.size());
        const T inv = T(1) / (T(1) - rate);
        Mat<T> out = v;
        for (std::size_t i = 0; i < v.size(); ++i) {
            keep[i] = rng.next_double() >= static_cast<double>(rate);
            out.a[i] = keep[i] ? v.a[i] * inv : T(0);
        }
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a, keep = std::move(keep), inv] {
            if (!wants(a)) return;
            const Mat<T>& g = nodes_[id].grad;
            Mat<T>& ga = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (keep[i]) ga.a[i] += g.a[i] * inv;
        };
        return id;
    }

    // Mean over rows of KL(gold_row || exp(logp_row)). gold rows are sparse
    // maps from column index to probability; entries off the support are zero.
    int kl_to_gold(int logp, const std::vector<std::map<int, double>>* gold) {
        const Mat<T>& lp = val(logp);
        const int n = lp.rows;
        double total = 0.0;
        for (int l = 0; l < n; ++l)
            for (const auto& [j, gj] : (*gold)[l])
                if (gj > 0.0) total += gj * (std::log(gj) - static_cast<double>(lp.at(l, j)));
        Mat<T> out(1, 1);
        out.at(0, 0) = static_cast<T>(total / n);
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, logp, gold, n] {
            if (!wants(logp)) return;
            const T go = nodes_[id].grad.at(0, 0);
            Mat<T>& g = grad(logp);
            for (int l = 0; l < n; ++l)
                for (const auto& [j, gj] : (*gold)[l])
                    g.at(l, j) -= go * static_cast<T>(gj) / static_cast<T>(n);
        };
        return id;
    }

    int sum_all(int a) {
        const Mat<T>& v = val(a);
        T s = T(0);
        for (const auto& x : v.a) s += x;
        Mat<T> out(1, 1);
        out.at(0, 0) = s;
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, a] {
            if (!wants(a)) return;
            const T go = nodes_[id].grad.at(0, 0);
            Mat<T>& ga = grad(a);
            for (auto& x : ga.a) x += go;
        };
        return id;
    }

    int mean_scalars(const std::vector<int>& ids) {
        T s = T(0);
        for (int v : ids) s += val(v).at(0, 0);
        Mat<T> out(1, 1);
        out.at(0, 0) = s / static_cast<T>(ids.size());
        int id = alloc(std::move(out));
        nodes_[id].back = [this, id, ids] {
            const T go = nodes_[id].grad.at(0, 0) / static_cast<T>(ids.size());
            for (int v : ids)
                if (wants(v)) grad(v).at(0, 0) += go;
        };
        return id;
    }

    // ---- execution ----

    void backward(int id) {
        grad(id).fill(T(0));
        grad(id).at(0, 0) = T(1);
        for (int i = id; i >= 0; --i)
            if (nodes_[i].back && !nodes_[i].grad.empty()) nodes_[i].back();
    }

    const Mat<T>& val(int id) const { return nodes_[id].val(); }

    Mat<T>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            const Mat<T>& v = n.val();
            n.grad = Mat<T>(v.rows, v.cols);
        }
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

private:
    struct Node {
        Mat<T> own;
        const Mat<T>* ref = nullptr;
        Mat<T> grad;
        std::function<void()> back;
        bool track = true;

        const Mat<T>& val() const { return ref ? *ref : own; }
    };

    int alloc(Mat<T> v) {
        nodes_.push_back(Node{std::move(v), nullptr, {}, {}, true});
        return last();
    }

    int last() const { return static_cast<int>(nodes_.size()) - 1; }

    // A node participates in backward once something downstream touched it.
    // Touching means its grad matrix got allocated.
    bool wants(int id) {
        if (!nodes_[id].track && !nodes_[id].back) return false;
        grad(id);
        return true;
    }

    static void acc(Mat<T>& dst, const Mat<T>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst.a[i] += src.a[i];
    }

    static void softmax_inplace(Mat<T>& m) {
        for (int i = 0; i < m.rows; ++i) {
            T mx = m.at(i, 0);
            for (int j = 1; j < m.cols; ++j) mx = std::max(mx, m.at(i, j));
            T z = T(0);
            for (int j = 0; j < m.cols; ++j) {
                m.at(i, j) = std::exp(m.at(i, j) - mx);
                z += m.at(i, j);
            }
            for (int j = 0; j < m.cols; ++j) m.at(i, j) /= z;
        }
    }

    const ParamStore<T>* params_;
    std::vector<Mat<T>>* grads_;
    std::vector<Node> nodes_;
};

} // namespace itsp
