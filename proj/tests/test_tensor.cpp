#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "lnz/ops.hpp"
#include "lnz/tape.hpp"
#include "lnz/tensor.hpp"

using namespace lnz;
using namespace lnz::test;
namespace op = lnz::ops;

TEST_CASE("matmul forward basics") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor col = Tensor::from({2, 1}, {3, 4});
    Tensor r = op::matmul(eye, col);
    CHECK(r.values()[0] == doctest::Approx(3));
    CHECK(r.values()[1] == doctest::Approx(4));

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(op::matmul(a, b).item() == doctest::Approx(11));

    CHECK_THROWS_AS(op::matmul(a, a), ShapeError);
    try {
        op::matmul(a, a);
    } catch (const ShapeError& e) {
        // the error names both shapes
        CHECK(std::string(e.what()).find("[1,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches the hand value and finite differences") {
    Tensor a = Tensor::from({1, 2}, {1, 2}, true);
    Tensor b = Tensor::from({2, 1}, {3, 4});
    {
        Tape tape;
        Tensor loss = op::sum(op::matmul(a, b));
        tape.backward(loss);
    }
    CHECK(a.grad()[0] == doctest::Approx(3).epsilon(1e-5));
    CHECK(a.grad()[1] == doctest::Approx(4).epsilon(1e-5));

    Rng rng(7);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor y = Tensor::randn({4, 2}, rng);
    check_grads([&] { return op::sum(op::matmul(x, y)); }, {x, y});
}

TEST_CASE("elementwise forward values") {
    CHECK(op::sigmoid(Tensor::scalar(0)).item() == doctest::Approx(0.5));
    CHECK(op::exp(Tensor::scalar(0)).item() == doctest::Approx(1));
    CHECK(op::silu(Tensor::scalar(0)).item() == doctest::Approx(0));
    CHECK(op::square(Tensor::scalar(-3)).item() == doctest::Approx(9));
    CHECK(op::scale(Tensor::scalar(2), 2.5f).item() == doctest::Approx(5));

    // derivative of sigmoid at 2
    Tensor x = Tensor::scalar(2, true);
    Tape tape;
    Tensor loss = op::sum(op::sigmoid(x));
    tape.backward(loss);
    const float s2 = 1.f / (1.f + std::exp(-2.f));
    CHECK(x.grad()[0] == doctest::Approx(s2 * (1 - s2)).epsilon(1e-4));
    CHECK(x.grad()[0] == doctest::Approx(0.10499).epsilon(1e-3));
}

TEST_CASE("broadcasting rules: scalar-to-tensor only") {
    Tensor a = Tensor::from({3}, {1, 2, 3});
    Tensor s = Tensor::scalar(10);
    Tensor r = op::add(a, s);
    CHECK(r.values()[2] == doctest::Approx(13));
    Tensor m = op::mul(s, a);
    CHECK(m.values()[1] == doctest::Approx(20));
    Tensor bad = Tensor::from({2}, {1, 2});
    CHECK_THROWS_AS(op::add(a, bad), ShapeError);
}

TEST_CASE("reductions") {
    Tensor v = Tensor::from({3}, {1, 2, 3});
    CHECK(op::sum(v).item() == doctest::Approx(6));
    CHECK(op::mean(Tensor::from({2}, {2, 4})).item() == doctest::Approx(3));

    // max routes gradient to the first index on ties
    Tensor x = Tensor::from({3}, {3, 3, 1}, true);
    Tape tape;
    Tensor loss = op::sum(op::max_over_axis(x, 0));
    CHECK(loss.item() == doctest::Approx(3));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(1));
    CHECK(x.grad()[1] == doctest::Approx(0));
    CHECK(x.grad()[2] == doctest::Approx(0));

    CHECK_THROWS_AS(op::sum_axis(v, 1), IndexError);
}

TEST_CASE("axis reductions over a matrix") {
    Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor s0 = op::sum_axis(m, 0);
    CHECK(s0.values()[0] == doctest::Approx(5));
    CHECK(s0.values()[2] == doctest::Approx(9));
    Tensor m1 = op::mean_axis(m, 1);
    CHECK(m1.values()[0] == doctest::Approx(2));
    CHECK(m1.values()[1] == doctest::Approx(5));
}

TEST_CASE("softmax cross entropy values") {
    // uniform logits: loss = ln V
    Tensor logits = Tensor::zeros({3, 4});
    std::vector<int32_t> tgt = {0, 1, 3};
    CHECK(op::softmax_cross_entropy(logits, tgt).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-5));

    // big gap: -log sigmoid(20)
    Tensor l2 = Tensor::from({1, 2}, {10, -10});
    std::vector<int32_t> t2 = {0};
    CHECK(op::softmax_cross_entropy(l2, t2).item() == doctest::Approx(2.06e-9).epsilon(0.05));

    // saturated one-hot at the target
    Tensor l3 = Tensor::from({1, 3}, {1e6f, 0, 0});
    std::vector<int32_t> t3 = {0};
    CHECK(op::softmax_cross_entropy(l3, t3).item() == doctest::Approx(0).epsilon(1e-6));

    std::vector<int32_t> bad = {4, 0, 0};
    CHECK_THROWS_AS(op::softmax_cross_entropy(logits, bad), IndexError);
}

TEST_CASE("backward basics") {
    // loss = x^2 at x = 3
    Tensor x = Tensor::scalar(3, true);
    {
        Tape tape;
        Tensor loss = op::sum(op::square(x));
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(6));
        // a second backward without a new forward is rejected
        CHECK_THROWS_AS(tape.backward(loss), StateError);
    }
    // non-scalar loss rejected
    {
        Tape tape;
        Tensor y = op::square(Tensor::from({2}, {1, 2}, true));
        CHECK_THROWS_AS(tape.backward(y), ShapeError);
    }
    // leaf not reachable from the loss keeps no gradient
    {
        Tensor used = Tensor::scalar(1, true);
        Tensor unused = Tensor::scalar(5, true);
        Tape tape;
        Tensor loss = op::sum(op::square(used));
        tape.backward(loss);
        CHECK(used.has_grad());
        CHECK_FALSE(unused.has_grad());
    }
}

TEST_CASE("backward of sum(sigmoid(Wx)) matches finite differences") {
    Rng rng(11);
    Tensor w = Tensor::randn({4, 3}, rng);
    Tensor x = Tensor::randn({3, 2}, rng);
    check_grads([&] { return op::sum(op::sigmoid(op::matmul(w, x))); }, {w, x});
}

TEST_CASE("gradient checks over many random seeds for every op") {
    // Property: analytic gradients match central differences across ops and
    // seeds. Runs >= 100 distinct random cases in total.
    for (uint64_t seed = 0; seed < 15; ++seed) {
        Rng rng(seed * 7919 + 3);
        Tensor a = Tensor::randn({3, 3}, rng);
        Tensor b = Tensor::randn({3, 3}, rng);
        check_grads([&] { return op::sum(op::matmul(a, b)); }, {a, b});
        check_grads([&] { return op::mean(op::mul(a, b)); }, {a, b});
        check_grads([&] { return op::sum(op::sigmoid(a)); }, {a});
        check_grads([&] { return op::sum(op::exp(op::scale(a, 0.3f))); }, {a});
        check_grads([&] { return op::sum(op::silu(a)); }, {a});
        check_grads([&] { return op::sum(op::square(a)); }, {a});
        check_grads([&] { return op::sum(op::max_over_axis(a, 1)); }, {a});
        check_grads([&] { return op::sum(op::mean_axis(op::add(a, b), 0)); }, {a, b});
    }
    // fused rows: rmsnorm, l2 normalize, rope, attention, embedding, CE, KL
    for (uint64_t seed = 0; seed < 4; ++seed) {
        Rng rng(seed + 101);
        Tensor x = Tensor::randn({4, 6}, rng);
        Tensor w = Tensor::full({6}, 1.f);
        check_grads([&] { return op::sum(op::rmsnorm(x, w)); }, {x, w});
        check_grads([&] { return op::sum(op::l2_normalize_last(x)); }, {x});

        Tensor q = Tensor::randn({1, 5, 2, 4}, rng, 0.7f);
        Tensor k = Tensor::randn({1, 5, 2, 4}, rng, 0.7f);
        Tensor v = Tensor::randn({1, 5, 2, 4}, rng, 0.7f);
        check_grads([&] { return op::sum(op::causal_attention(q, k, v)); }, {q, k, v});
        check_grads([&] { return op::sum(op::rope(q, 3)); }, {q});

        Tensor table = Tensor::randn({7, 3}, rng);
        std::vector<int32_t> ids = {0, 6, 3, 3};
        check_grads([&] { return op::sum(op::embedding(table, ids)); }, {table});

        Tensor logits = Tensor::randn({4, 5}, rng);
        Tensor tlogits = Tensor::randn({4, 5}, rng);
        std::vector<int32_t> tgt = {1, 0, 4, 2};
        check_grads([&] { return op::softmax_cross_entropy(logits, tgt); }, {logits});
        check_grads([&] { return op::kl_teacher_student(tlogits, logits); }, {logits});
        check_grads([&] { return op::sum(op::pow_const(op::sigmoid(x), 1.f / 16)); }, {x});
        Tensor bias = Tensor::randn({6}, rng);
        check_grads([&] { return op::sum(op::silu(op::add_rowbias(x, bias))); }, {x, bias});
    }
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
    auto run = [] {
        Rng rng(42);
        Tensor a = Tensor::randn({16, 16}, rng);
        Tensor b = Tensor::randn({16, 16}, rng);
        Tensor r = op::matmul(op::sigmoid(a), b);
        return std::vector<float>(r.values().begin(), r.values().end());
    };
    CHECK(run() == run());
}

TEST_CASE("backward linearity: grad of a*f + b*g decomposes") {
    Rng rng(5);
    std::vector<float> init(9);
    for (float& v : init) v = rng.normal();
    const float ca = 1.7f, cb = -0.6f;

    auto grads_of = [&](int which) {
        Tensor x = Tensor::from({3, 3}, init, true);
        Tape tape;
        Tensor f = op::sum(op::square(x));
        Tensor g = op::mean(op::sigmoid(x));
        Tensor loss = which == 0   ? f
                      : which == 1 ? g
                                   : op::add(op::scale(f, ca), op::scale(g, cb));
        tape.backward(loss);
        auto gr = x.grad();
        return std::vector<float>(gr.begin(), gr.end());
    };
    auto gf = grads_of(0), gg = grads_of(1), gc = grads_of(2);
    for (size_t i = 0; i < gf.size(); ++i) {
        CHECK(gc[i] == doctest::Approx(ca * gf[i] + cb * gg[i]).epsilon(1e-6));
    }
}

TEST_CASE("reshape aliases storage and gradients") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    Tensor flat = x.reshape({6});
    Tensor loss = op::sum(op::square(flat));
    tape.backward(loss);
    CHECK(x.grad()[5] == doctest::Approx(12));
}
