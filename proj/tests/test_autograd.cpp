#include <cmath>
#include <vector>

#include "doctest.h"
#include "dtlsd/autograd.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"

using dtlsd::Parameter;
using dtlsd::Rng;
using dtlsd::Tensor;
namespace ag = dtlsd::ag;

namespace {

Tensor random_tensor(const std::vector<std::size_t>& shape, Rng& rng,
                     double lo = -2.0, double hi = 2.0) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Parameter make_param(const std::string& name, Tensor v) {
    Parameter p;
    p.name = name;
    p.value = std::move(v);
    p.grad = Tensor(p.value.shape());
    p.adam_m = Tensor(p.value.shape());
    p.adam_v = Tensor(p.value.shape());
    return p;
}

// Dots the op output with a fixed random tensor so the loss is scalar and
// the incoming gradient is non-uniform, then finite-difference checks it.
double fd_check(Parameter& p, Rng& rng,
                const std::function<ag::Var(ag::Tape&, ag::Var)>& op) {
    ag::Tape probe;
    ag::Var probe_out = op(probe, probe.leaf(p));
    Tensor weights = random_tensor(probe.value(probe_out).shape(), rng);

    auto build = [&](ag::Tape& tape) {
        ag::Var out = op(tape, tape.leaf(p));
        return ag::sum(ag::mul(out, tape.constant(weights)));
    };
    Parameter* params[] = {&p};
    return dtlsd::grad_check(build, params, 1e-5).max_rel_err;
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 7919 + 13);
        Parameter a = make_param("a", random_tensor({2, 3}, rng));
        Parameter b = make_param("b", random_tensor({2, 3}, rng));
        // Positive values for log; interior values for abs/clamp/logit so the
        // finite-difference probe never crosses a kink.
        Parameter pos = make_param("pos", random_tensor({2, 3}, rng, 0.5, 3.0));
        Parameter frac = make_param("frac", random_tensor({2, 3}, rng, 0.1, 0.9));

        auto with_b = [&](auto fn) {
            return [&, fn](ag::Tape& t, ag::Var x) { return fn(t, x); };
        };
        (void)with_b;

        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::neg(x); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::scale(x, -1.7); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::add_scalar(x, 2.5); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::exp(x); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::sigmoid(x); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::gelu(x); }) < 1e-4);
        CHECK(fd_check(pos, rng, [](ag::Tape&, ag::Var x) { return ag::log(x); }) < 1e-4);
        CHECK(fd_check(pos, rng, [](ag::Tape&, ag::Var x) { return ag::abs(x); }) < 1e-4);
        CHECK(fd_check(pos, rng, [](ag::Tape&, ag::Var x) { return ag::clamp(x, 0.0, 10.0); }) < 1e-4);
        CHECK(fd_check(frac, rng, [](ag::Tape&, ag::Var x) { return ag::logit(x); }) < 1e-4);

        Tensor bv = b.value;
        CHECK(fd_check(a, rng, [&bv](ag::Tape& t, ag::Var x) {
                  return ag::add(x, t.constant(bv));
              }) < 1e-4);
        CHECK(fd_check(a, rng, [&bv](ag::Tape& t, ag::Var x) {
                  return ag::sub(t.constant(bv), x);
              }) < 1e-4);
        CHECK(fd_check(a, rng, [&bv](ag::Tape& t, ag::Var x) {
                  return ag::mul(x, t.constant(bv));
              }) < 1e-4);
    }
}

TEST_CASE("matmul and reduction gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 104729 + 5);
        Parameter a = make_param("a", random_tensor({3, 4}, rng));
        Parameter w = make_param("w", random_tensor({4, 2}, rng));

        Tensor wv = w.value;
        CHECK(fd_check(a, rng, [&wv](ag::Tape& t, ag::Var x) {
                  return ag::matmul(x, t.constant(wv));
              }) < 1e-4);
        Tensor av = a.value;
        CHECK(fd_check(w, rng, [&av](ag::Tape& t, ag::Var x) {
                  return ag::matmul(t.constant(av), x);
              }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::sum(x); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::mean(x); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::softmax(x, 1); }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) { return ag::softmax(x, 0); }) < 1e-4);
    }
}

TEST_CASE("structural op gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 31 + 3);
        Parameter a = make_param("a", random_tensor({4, 3}, rng));
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) {
                  return ag::reshape(x, {2, 6});
              }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) {
                  return ag::slice_rows(x, 1, 3);
              }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) {
                  return ag::gather_rows(x, {2, 0, 2, 3});
              }) < 1e-4);
        CHECK(fd_check(a, rng, [](ag::Tape&, ag::Var x) {
                  auto top = ag::slice_rows(x, 0, 2);
                  auto bottom = ag::slice_rows(x, 2, 4);
                  return ag::concat_rows({bottom, top});
              }) < 1e-4);
    }
}

TEST_CASE("masked softmax and layer norm gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 433 + 17);
        const std::size_t n = 4;
        Parameter s = make_param("s", random_tensor({n, n}, rng));
        std::vector<std::uint8_t> blocked(n * n, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) blocked[i * n + j] = rng.bernoulli(0.4) ? 1 : 0;
        CHECK(fd_check(s, rng, [&blocked](ag::Tape&, ag::Var x) {
                  return ag::masked_softmax_rows(x, blocked);
              }) < 1e-4);

        Parameter x = make_param("x", random_tensor({3, 5}, rng));
        Parameter gain = make_param("g", random_tensor({5}, rng, 0.5, 1.5));
        Parameter bias = make_param("b", random_tensor({5}, rng, -0.5, 0.5));
        Tensor gv = gain.value, bv = bias.value;
        CHECK(fd_check(x, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::layer_norm(v, t.constant(gv), t.constant(bv));
              }) < 1e-4);
        Tensor xv = x.value;
        CHECK(fd_check(gain, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::layer_norm(t.constant(xv), v, t.constant(bv));
              }) < 1e-4);
        CHECK(fd_check(bias, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::layer_norm(t.constant(xv), t.constant(gv), v);
              }) < 1e-4);
    }
}

TEST_CASE("strided conv gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed * 97 + 1);
        Parameter x = make_param("x", random_tensor({4, 4, 2}, rng));
        Parameter k = make_param("k", random_tensor({3, 3, 2, 3}, rng, -0.5, 0.5));
        Parameter b = make_param("b", random_tensor({3}, rng, -0.2, 0.2));
        Tensor kv = k.value, bv = b.value, xv = x.value;
        CHECK(fd_check(x, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::conv3x3_s2(v, t.constant(kv), t.constant(bv));
              }) < 1e-4);
        CHECK(fd_check(k, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::conv3x3_s2(t.constant(xv), v, t.constant(bv));
              }) < 1e-4);
        CHECK(fd_check(b, rng, [&](ag::Tape& t, ag::Var v) {
                  return ag::conv3x3_s2(t.constant(xv), t.constant(kv), v);
              }) < 1e-4);
    }
}

TEST_CASE("gradients accumulate when a parameter is used twice") {
    Parameter p = make_param("p", Tensor({1}, {3.0}));
    ag::Tape tape;
    ag::Var x1 = tape.leaf(p);
    ag::Var x2 = tape.leaf(p);
    // loss = x * x via two separate leaves: d/dx = 2x = 6.
    ag::Var loss = ag::sum(ag::mul(x1, x2));
    tape.backward(loss);
    CHECK(p.grad[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("constant branches receive no gradient and do not grow param grads") {
    Parameter p = make_param("p", Tensor({2}, {1.0, 2.0}));
    ag::Tape tape;
    ag::Var x = tape.leaf(p);
    ag::Var c = tape.constant(Tensor({2}, {5.0, 5.0}));
    ag::Var loss = ag::sum(ag::add(x, c));
    tape.backward(loss);
    CHECK(p.grad[0] == doctest::Approx(1.0));
    CHECK(p.grad[1] == doctest::Approx(1.0));
}

TEST_CASE("forward values of scalar nonlinearities") {
    ag::Tape tape;
    ag::Var x = tape.input(Tensor({3}, {0.0, 100.0, -100.0}));
    const Tensor& sig = tape.value(ag::sigmoid(x));
    CHECK(sig[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sig[1] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sig[2] == doctest::Approx(0.0).epsilon(1e-9));

    const Tensor& g = tape.value(ag::gelu(tape.input(Tensor({2}, {0.0, 10.0}))));
    CHECK(g[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(10.0).epsilon(1e-9));

    // logit inverts sigmoid away from the clamp region.
    ag::Var p = tape.input(Tensor({1}, {0.731058578630004896}));
    CHECK(tape.value(ag::logit(p))[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("masked softmax zeroes blocked entries and renormalizes the rest") {
    ag::Tape tape;
    ag::Var s = tape.input(Tensor({2, 3}, {0.0, 0.0, 0.0, 1.0, 2.0, 3.0}));
    std::vector<std::uint8_t> blocked = {0, 1, 0, 0, 0, 0};
    const Tensor& y = tape.value(ag::masked_softmax_rows(s, blocked));
    CHECK(y.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.at2(0, 1) == 0.0);
    CHECK(y.at2(0, 2) == doctest::Approx(0.5).epsilon(1e-12));
    double row1 = y.at2(1, 0) + y.at2(1, 1) + y.at2(1, 2);
    CHECK(row1 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer norm normalizes each row") {
    ag::Tape tape;
    ag::Var x = tape.input(Tensor({2, 4}, {1, 2, 3, 4, -5, 0, 5, 10}));
    ag::Var gain = tape.input(Tensor::full({4}, 1.0));
    ag::Var bias = tape.input(Tensor({4}));
    const Tensor& y = tape.value(ag::layer_norm(x, gain, bias));
    for (std::size_t r = 0; r < 2; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 4; ++c) m += y.at2(r, c);
        m /= 4.0;
        for (std::size_t c = 0; c < 4; ++c) {
            double d = y.at2(r, c) - m;
            v += d * d;
        }
        v /= 4.0;
        CHECK(std::abs(m) < 1e-9);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    }
}
