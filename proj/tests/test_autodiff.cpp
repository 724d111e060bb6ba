#include "doctest.h"

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "itsp/autodiff.hpp"

using itsp::Mat;
using itsp::ParamStore;
using itsp::Rng;
using itsp::Tape;

namespace {

// Central finite differences of a scalar-valued graph with respect to every
// entry of every registered parameter.
double fd_max_rel_error(ParamStore<double>& params,
                        const std::function<double(Tape<double>&)>& forward_to_loss) {
    auto grads = params.make_grad_buffer();
    {
        Tape<double> tape(&params, &grads);
        forward_to_loss(tape);
    }
    const double eps = 1e-6;
    double worst = 0.0;
    for (int p = 0; p < params.count(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = params[p].a[i];
            params[p].a[i] = orig + eps;
            Tape<double> tp(&params, nullptr);
            const double fp = forward_to_loss(tp);
            params[p].a[i] = orig - eps;
            Tape<double> tm(&params, nullptr);
            const double fm = forward_to_loss(tm);
            params[p].a[i] = orig;
            const double fd = (fp - fm) / (2 * eps);
            const double an = grads[p].a[i];
            const double rel = std::fabs(fd - an) / std::max(1.0, std::fabs(fd) + std::fabs(an));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// Wraps forward_to_loss so the same lambda both runs backward (when a grad
// buffer is attached) and returns the loss value.
std::function<double(Tape<double>&)> with_backward(std::function<int(Tape<double>&)> build) {
    return [build](Tape<double>& tape) {
        const int loss = build(tape);
        const double v = tape.val(loss).at(0, 0);
        tape.backward(loss);
        return v;
    };
}

Mat<double> randm(int r, int c, Rng& rng) { return Mat<double>::randn(r, c, 0.7, rng); }

} // namespace

TEST_CASE("matmul chain gradients match finite differences") {
    Rng rng(11);
    ParamStore<double> ps;
    const int A = ps.add("A", randm(3, 4, rng));
    const int B = ps.add("B", randm(4, 5, rng));
    const int C = ps.add("C", randm(3, 5, rng));
    auto loss = with_backward([&](Tape<double>& t) {
        int m = t.matmul(t.param(A), t.param(B));
        int s = t.add(m, t.param(C));
        int r = t.relu(s);
        return t.sum_all(r);
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-7);
}

TEST_CASE("matmul_nt, scale, slice, concat gradients") {
    Rng rng(12);
    ParamStore<double> ps;
    const int A = ps.add("A", randm(4, 6, rng));
    const int B = ps.add("B", randm(5, 6, rng));
    auto loss = with_backward([&](Tape<double>& t) {
        int s = t.matmul_nt(t.param(A), t.param(B)); // 4 x 5
        int sc = t.scale(s, 0.37);
        int left = t.slice_cols(sc, 0, 2);
        int right = t.slice_cols(sc, 2, 5);
        int both = t.concat_cols(right, left);
        int top = t.slice_rows(both, 0, 3);
        return t.sum_all(t.relu(top));
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-7);
}

TEST_CASE("softmax and log_softmax gradients") {
    Rng rng(13);
    ParamStore<double> ps;
    const int A = ps.add("A", randm(3, 7, rng));
    const int W = ps.add("W", randm(7, 7, rng));
    auto loss = with_backward([&](Tape<double>& t) {
        int x = t.matmul(t.param(A), t.param(W));
        int sm = t.softmax_rows(x);
        int lsm = t.log_softmax_rows(x);
        int mixed = t.add(sm, t.scale(lsm, 0.1));
        return t.sum_all(t.relu(mixed));
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-6);
}

TEST_CASE("layer_norm gradients") {
    Rng rng(14);
    ParamStore<double> ps;
    const int X = ps.add("X", randm(4, 8, rng));
    const int G = ps.add("G", Mat<double>::constant(1, 8, 1.1));
    const int B = ps.add("B", randm(1, 8, rng));
    const int W = ps.add("W", randm(8, 3, rng));
    auto loss = with_backward([&](Tape<double>& t) {
        int y = t.layer_norm(t.param(X), t.param(G), t.param(B));
        int z = t.matmul(y, t.param(W));
        return t.sum_all(t.relu(z));
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-6);
}

TEST_CASE("gather/assemble/broadcast gradients") {
    Rng rng(15);
    ParamStore<double> ps;
    const int E = ps.add("E", randm(6, 5, rng));
    const int F = ps.add("F", randm(3, 5, rng));
    const int b = ps.add("b", randm(1, 5, rng));
    auto loss = with_backward([&](Tape<double>& t) {
        int e = t.param(E);
        int f = t.param(F);
        int g = t.gather_rows(e, {0, 2, 2, 5});
        int asm_ = t.assemble_rows({{g, 1}, {f, 0}, {g, 3}, {f, 2}, {g, 1}});
        int h = t.add_row_broadcast(asm_, t.param(b));
        return t.sum_all(t.relu(h));
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-7);
}

TEST_CASE("kl_to_gold gradient and value") {
    Rng rng(16);
    ParamStore<double> ps;
    const int A = ps.add("A", randm(2, 6, rng));
    const int W = ps.add("W", randm(6, 6, rng));
    std::vector<std::map<int, double>> gold = {{{1, 0.5}, {4, 0.5}}, {{0, 1.0}}};
    auto loss = with_backward([&](Tape<double>& t) {
        int x = t.matmul(t.param(A), t.param(W));
        int lp = t.log_softmax_rows(x);
        return t.kl_to_gold(lp, &gold);
    });
    CHECK(fd_max_rel_error(ps, loss) < 1e-7);

    // Value check against a direct computation.
    auto grads = ps.make_grad_buffer();
    Tape<double> t(&ps, &grads);
    int x = t.matmul(t.param(A), t.param(W));
    int lp = t.log_softmax_rows(x);
    int l = t.kl_to_gold(lp, &gold);
    double expect = 0.0;
    for (int row = 0; row < 2; ++row)
        for (const auto& [j, gj] : gold[row])
            expect += gj * (std::log(gj) - t.val(lp).at(row, j));
    expect /= 2.0;
    CHECK(t.val(l).at(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("dropout is identity in eval mode and masks in train mode") {
    Rng rng(17);
    ParamStore<double> ps;
    Mat<double> x = randm(8, 8, rng);
    Tape<double> t;
    int a = t.leaf_ref(&x);
    Rng drop_rng(5);
    int ev = t.dropout(a, 0.5, drop_rng, false);
    CHECK(ev == a);
    int tr = t.dropout(a, 0.5, drop_rng, true);
    int zeros = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double y = t.val(tr).a[i];
        if (y == 0.0) {
            ++zeros;
        } else {
            CHECK(y == doctest::Approx(x.a[i] * 2.0));
        }
    }
    CHECK(zeros > 10);
    CHECK(zeros < 54);
}

TEST_CASE("input nodes receive gradients, plain leaves do not") {
    Mat<double> x = Mat<double>::constant(2, 3, 1.5);
    Mat<double> y = Mat<double>::constant(2, 3, -0.5);
    Tape<double> t;
    int xi = t.input(&x);
    int yi = t.leaf_ref(&y);
    int s = t.sum_all(t.add(xi, yi));
    t.backward(s);
    CHECK(t.has_grad(xi));
    CHECK(t.grad(xi).at(1, 2) == doctest::Approx(1.0));
    CHECK(!t.has_grad(yi));
}
