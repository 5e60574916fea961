#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "mmfl/nnkit.hpp"

using namespace mmfl;
using namespace mmfl::nnkit;

namespace {

AudioModel make_test_audio_model(std::uint64_t seed, std::size_t in = 3, std::size_t hidden = 5,
                                 std::size_t embed = 4, std::size_t classes = 3) {
    Rng rng(seed);
    AudioModel m;
    m.encoder = make_dense_net({in, hidden, embed}, {Activation::Relu, Activation::Identity}, rng);
    m.head = make_dense_net({embed, classes}, {Activation::Identity}, rng);
    return m;
}

MultimodalModel make_test_multimodal_model(std::uint64_t seed) {
    Rng rng(seed);
    MultimodalModel m;
    m.audio_encoder = make_dense_net({3, 5, 4}, {Activation::Relu, Activation::Identity}, rng);
    m.visual_encoder = make_dense_net({2, 5, 4}, {Activation::Relu, Activation::Identity}, rng);
    m.fusion_head = make_dense_net({8, 3}, {Activation::Identity}, rng);
    return m;
}

AudioBatch random_audio_batch(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes) {
    AudioBatch b;
    for (std::size_t i = 0; i < n; ++i) {
        Vec x(dim);
        for (auto& v : x) v = rng.normal();
        b.inputs.push_back(x);
        b.labels.push_back(rng.uniform_int(classes));
    }
    return b;
}

// Central finite differences of `loss_at` around `params`.
Vec finite_difference_grad(const std::function<double(const Vec&)>& loss_at, const Vec& params,
                           double h = 1e-5) {
    Vec grad(params.size());
    Vec p = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        p[i] = params[i] + h;
        const double up = loss_at(p);
        p[i] = params[i] - h;
        const double down = loss_at(p);
        p[i] = params[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

void check_grad_close(const Vec& analytic, const Vec& numeric, double rel_tol = 1e-4,
                      double abs_tol = 1e-8) {
    REQUIRE(analytic.size() == numeric.size());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::fabs(analytic[i] - numeric[i]);
        const double scale = std::max(std::fabs(analytic[i]), std::fabs(numeric[i]));
        if (scale < 1e-4) {
            CHECK(diff <= abs_tol);
        } else {
            CHECK(diff / scale <= rel_tol);
        }
    }
}

}  // namespace

TEST_CASE("softmax examples and stability") {
    CHECK(softmax({0.0, 0.0})[0] == doctest::Approx(0.5).epsilon(1e-12));
    const Vec p = softmax({std::log(1.0), std::log(3.0)});
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
    const Vec big = softmax({1000.0, 1000.0});
    CHECK(big[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(softmax({1.0, std::nan("")}), std::invalid_argument);
    CHECK_THROWS_AS(softmax({}), std::invalid_argument);
}

TEST_CASE("softmax normalization property") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        Vec z(1 + rng.uniform_int(8));
        for (auto& v : z) v = rng.uniform(-1e2, 1e2);
        const Vec p = softmax(z);
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            CHECK(x <= 1.0);
            sum += x;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("temper fixed points and exact example") {
    const Vec uniform{0.5, 0.5};
    const Vec t7 = temper(uniform, 7.0);
    CHECK(t7[0] == doctest::Approx(0.5).epsilon(1e-12));

    const Vec p{0.3, 0.2, 0.5};
    const Vec t1 = temper(p, 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::fabs(t1[i] - p[i]) <= 1e-12);

    // sqrt(0.8)/(sqrt(0.8)+sqrt(0.2)) = 2/3 exactly
    const Vec t2 = temper({0.8, 0.2}, 2.0);
    CHECK(t2[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(t2[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(temper(p, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(temper(p, -1.0), std::invalid_argument);
}

TEST_CASE("temper is a monoid action") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Vec p = softmax(random_audio_batch(rng, 1, 4, 2).inputs[0]);
        const double t1 = rng.uniform(0.3, 5.0);
        const double t2 = rng.uniform(0.3, 5.0);
        const Vec a = temper(temper(p, t1), t2);
        const Vec b = temper(p, t1 * t2);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-10);
    }
}

TEST_CASE("kl_div hand values and nonnegativity") {
    const Vec p{0.4, 0.6};
    CHECK(kl_div(p, p) < 1e-12);
    CHECK(kl_div({1.0, 0.0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(kl_div({0.5, 0.5}, {0.75, 0.25}) ==
          doctest::Approx(0.5 * std::log(4.0 / 3.0)).epsilon(1e-12));
    CHECK_THROWS_AS(kl_div({0.5, 0.5}, {1.0}), std::invalid_argument);

    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        Vec a(3), b(3);
        for (auto& v : a) v = rng.uniform(0.01, 1.0);
        for (auto& v : b) v = rng.uniform(0.01, 1.0);
        double sa = a[0] + a[1] + a[2], sb = b[0] + b[1] + b[2];
        for (auto& v : a) v /= sa;
        for (auto& v : b) v /= sb;
        CHECK(kl_div(a, b) >= -1e-12);
    }
}

TEST_CASE("forward_audio trivial nets") {
    AudioModel zero = make_test_audio_model(1);
    for (auto& l : zero.encoder.layers) {
        std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    for (auto& l : zero.head.layers) {
        std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    const Vec logits = forward_audio(zero, {1.0, -2.0, 3.0}).logits;
    for (double v : logits) CHECK(v == 0.0);

    // single identity layer passes input through
    AudioModel ident;
    ident.encoder.layers.push_back({Matrix(2, 2), {0.0, 0.0}, Activation::Identity});
    ident.encoder.layers[0].weight.at(0, 0) = 1.0;
    ident.encoder.layers[0].weight.at(1, 1) = 1.0;
    ident.head.layers.push_back({Matrix(2, 2), {0.0, 0.0}, Activation::Identity});
    ident.head.layers[0].weight.at(0, 0) = 1.0;
    ident.head.layers[0].weight.at(1, 1) = 1.0;
    const Vec out = forward_audio(ident, {4.0, -7.0}).logits;
    CHECK(out[0] == 4.0);
    CHECK(out[1] == -7.0);

    CHECK_THROWS_AS(forward_audio(ident, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("forward_audio matches manual matrix arithmetic") {
    // 2-layer net on a 2-dim input, evaluated by hand:
    //   h = relu(W1 x + b1), y = W2 h + b2
    AudioModel m;
    m.encoder.layers.push_back({Matrix(2, 2), {0.5, -1.0}, Activation::Relu});
    auto& w1 = m.encoder.layers[0].weight;
    w1.at(0, 0) = 1.0; w1.at(0, 1) = 2.0;
    w1.at(1, 0) = -1.0; w1.at(1, 1) = 0.5;
    m.head.layers.push_back({Matrix(2, 2), {0.1, 0.2}, Activation::Identity});
    auto& w2 = m.head.layers[0].weight;
    w2.at(0, 0) = 3.0; w2.at(0, 1) = -2.0;
    w2.at(1, 0) = 0.5; w2.at(1, 1) = 1.5;

    // x = [1, -1]: pre1 = [1-2+0.5, -1-0.5-1] = [-0.5, -2.5] -> relu = [0, 0]
    // y = [0.1, 0.2]
    Vec y = forward_audio(m, {1.0, -1.0}).logits;
    CHECK(y[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(0.2).epsilon(1e-15));

    // x = [2, 1]: pre1 = [2+2+0.5, -2+0.5-1] = [4.5, -2.5] -> relu = [4.5, 0]
    // y = [3*4.5 + 0.1, 0.5*4.5 + 0.2] = [13.6, 2.45]
    y = forward_audio(m, {2.0, 1.0}).logits;
    CHECK(y[0] == doctest::Approx(13.6).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(2.45).epsilon(1e-15));
}

TEST_CASE("forward_multimodal concatenation contract") {
    // identity encoders + identity fusion head on 1-dim embeddings:
    // logits = concat(x_a, x_v)
    MultimodalModel m;
    m.audio_encoder.layers.push_back({Matrix(1, 1), {0.0}, Activation::Identity});
    m.audio_encoder.layers[0].weight.at(0, 0) = 1.0;
    m.visual_encoder.layers.push_back({Matrix(1, 1), {0.0}, Activation::Identity});
    m.visual_encoder.layers[0].weight.at(0, 0) = 1.0;
    m.fusion_head.layers.push_back({Matrix(2, 2), {0.0, 0.0}, Activation::Identity});
    m.fusion_head.layers[0].weight.at(0, 0) = 1.0;
    m.fusion_head.layers[0].weight.at(1, 1) = 1.0;
    const Vec logits = forward_multimodal(m, {3.5}, {-2.0}).logits;
    CHECK(logits[0] == 3.5);
    CHECK(logits[1] == -2.0);

    // zero encoders -> bias-only logits
    MultimodalModel z = make_test_multimodal_model(5);
    for (auto* net : {&z.audio_encoder, &z.visual_encoder}) {
        for (auto& l : net->layers) {
            std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
            std::fill(l.bias.begin(), l.bias.end(), 0.0);
        }
    }
    z.fusion_head.layers[0].bias = {1.0, 2.0, 3.0};
    const Vec bias_logits = forward_multimodal(z, {1.0, 1.0, 1.0}, {1.0, 1.0}).logits;
    CHECK(bias_logits[0] == 1.0);
    CHECK(bias_logits[1] == 2.0);
    CHECK(bias_logits[2] == 3.0);
}

TEST_CASE("flat serialization round-trips to bit-identical forwards") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        AudioModel m = make_test_audio_model(100 + trial);
        const Vec flat = m.to_flat();
        AudioModel copy = make_test_audio_model(999);  // same shape, different values
        copy.from_flat(flat);
        Vec x(3);
        for (auto& v : x) v = rng.normal();
        const Vec a = forward_audio(m, x).logits;
        const Vec b = forward_audio(copy, x).logits;
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
        CHECK(copy.to_flat() == flat);
    }
}

TEST_CASE("grad_ce matches finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        AudioModel m = make_test_audio_model(seed);
        Rng rng(seed + 50);
        const AudioBatch batch = random_audio_batch(rng, 4, 3, 3);
        const GradResult g = grad_ce(m, batch);
        const Vec fd = finite_difference_grad(
            [&](const Vec& p) {
                AudioModel probe = m;
                probe.from_flat(p);
                double loss = 0.0;
                for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
                    loss += cross_entropy(softmax(forward_audio(probe, batch.inputs[i]).logits),
                                          batch.labels[i]);
                }
                return loss / static_cast<double>(batch.inputs.size());
            },
            m.to_flat());
        check_grad_close(g.grad, fd);
    }
}

TEST_CASE("grad_ce multimodal matches finite differences") {
    MultimodalModel m = make_test_multimodal_model(9);
    Rng rng(19);
    MultimodalBatch batch;
    for (int i = 0; i < 4; ++i) {
        Vec a(3), v(2);
        for (auto& x : a) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        batch.audio.push_back(a);
        batch.visual.push_back(v);
        batch.labels.push_back(rng.uniform_int(3));
    }
    const GradResult g = grad_ce(m, batch);
    const Vec fd = finite_difference_grad(
        [&](const Vec& p) {
            MultimodalModel probe = m;
            probe.from_flat(p);
            double loss = 0.0;
            for (std::size_t i = 0; i < batch.audio.size(); ++i) {
                loss += cross_entropy(
                    softmax(forward_multimodal(probe, batch.audio[i], batch.visual[i]).logits),
                    batch.labels[i]);
            }
            return loss / static_cast<double>(batch.audio.size());
        },
        m.to_flat());
    check_grad_close(g.grad, fd);
}

TEST_CASE("grad_ce batch invariances") {
    AudioModel m = make_test_audio_model(33);
    Rng rng(34);
    AudioBatch batch = random_audio_batch(rng, 3, 3, 3);
    const GradResult g1 = grad_ce(m, batch);
    AudioBatch doubled = batch;
    doubled.inputs.insert(doubled.inputs.end(), batch.inputs.begin(), batch.inputs.end());
    doubled.labels.insert(doubled.labels.end(), batch.labels.begin(), batch.labels.end());
    const GradResult g2 = grad_ce(m, doubled);
    for (std::size_t i = 0; i < g1.grad.size(); ++i) {
        CHECK(g1.grad[i] == doctest::Approx(g2.grad[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(grad_ce(m, AudioBatch{}), std::invalid_argument);
}

TEST_CASE("grad_ce vanishes as prediction confidence approaches 1") {
    // A head with a huge correct-class bias drives softmax to one-hot.
    AudioModel m = make_test_audio_model(40);
    AudioBatch batch;
    batch.inputs.push_back({0.1, 0.2, 0.3});
    batch.labels.push_back(1);
    double prev_norm = 1e18;
    for (double boost : {5.0, 10.0, 20.0}) {
        AudioModel boosted = m;
        boosted.head.layers.back().bias[1] = boost;
        const GradResult g = grad_ce(boosted, batch);
        double norm = 0.0;
        for (double v : g.grad) norm += v * v;
        norm = std::sqrt(norm);
        CHECK(norm < prev_norm);
        prev_norm = norm;
    }
    CHECK(prev_norm < 1e-6);
}

TEST_CASE("grad_distill matches finite differences") {
    for (double temperature : {1.0, 2.0, 4.0}) {
        AudioModel student = make_test_audio_model(60);
        Rng rng(61);
        const AudioBatch batch = random_audio_batch(rng, 4, 3, 3);
        std::vector<Vec> teacher_probs;
        for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
            Vec z(3);
            for (auto& v : z) v = rng.normal();
            teacher_probs.push_back(softmax(z));
        }
        const GradResult g = grad_distill(student, teacher_probs, batch, temperature, 1.0);
        const Vec fd = finite_difference_grad(
            [&](const Vec& p) {
                AudioModel probe = student;
                probe.from_flat(p);
                double loss = 0.0;
                for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
                    const Vec probs = softmax(forward_audio(probe, batch.inputs[i]).logits);
                    loss += cross_entropy(probs, batch.labels[i]);
                    loss += kl_div(temper(probs, temperature),
                                   temper(teacher_probs[i], temperature));
                }
                return loss / static_cast<double>(batch.inputs.size());
            },
            student.to_flat());
        check_grad_close(g.grad, fd);
    }
}

TEST_CASE("grad_distill KL term vanishes when student matches teacher") {
    AudioModel student = make_test_audio_model(70);
    Rng rng(71);
    const AudioBatch batch = random_audio_batch(rng, 3, 3, 3);
    std::vector<Vec> teacher_probs;
    for (const auto& x : batch.inputs) {
        teacher_probs.push_back(softmax(forward_audio(student, x).logits));
    }
    const GradResult with_kl = grad_distill(student, teacher_probs, batch, 2.0, 1.0);
    const GradResult ce_only = grad_ce(student, batch);
    double norm = 0.0;
    for (std::size_t i = 0; i < with_kl.grad.size(); ++i) {
        const double d = with_kl.grad[i] - ce_only.grad[i];
        norm += d * d;
    }
    CHECK(std::sqrt(norm) < 1e-8);
}

TEST_CASE("grad_distill with uniform teacher at T=1 matches the entropy closed form") {
    // KL(p || u) = sum p log p + log K, so its z-gradient is
    // p_k (log p_k - sum_j p_j log p_j).
    AudioModel student = make_test_audio_model(80);
    Rng rng(81);
    const AudioBatch batch = random_audio_batch(rng, 3, 3, 3);
    const std::vector<Vec> uniform(batch.inputs.size(), Vec(3, 1.0 / 3.0));
    const GradResult g = grad_distill(student, uniform, batch, 1.0, 1.0);

    Vec expected(student.param_count(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    {
        const GradResult ce = grad_ce(student, batch);
        expected = ce.grad;
    }
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        const AudioCache cache = forward_audio(student, batch.inputs[i]);
        const Vec p = softmax(cache.logits);
        double plogp = 0.0;
        for (double v : p) plogp += v * std::log(v);
        Vec d(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) d[k] = inv_n * p[k] * (std::log(p[k]) - plogp);
        const Vec demb = net_backward(student.head, cache.head, d,
                                      expected.data() + student.encoder.param_count());
        net_backward(student.encoder, cache.encoder, demb, expected.data());
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(std::fabs(g.grad[i] - expected[i]) <= 1e-10);
    }

    CHECK_THROWS_AS(grad_distill(student, {uniform[0]}, batch, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("sgd_step arithmetic") {
    Vec p{1.0, 2.0};
    sgd_step(p, {0.0, 0.0}, 0.5);
    CHECK(p == Vec{1.0, 2.0});
    sgd_step(p, {1.0, -1.0}, 0.5);
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 2.5);

    Vec a{3.0, -1.0}, b{3.0, -1.0};
    const Vec g{0.25, 0.75};
    sgd_step(a, g, 0.1);
    sgd_step(a, g, 0.1);
    Vec g2 = g;
    for (auto& v : g2) v *= 2.0;
    sgd_step(b, g2, 0.1);
    CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-15));

    CHECK_THROWS_AS(sgd_step(a, {1.0}, 0.1), std::invalid_argument);
}
