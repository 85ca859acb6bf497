#include <gtest/gtest.h>

#include "codiff/diffusion.hpp"
#include "codiff/encoder.hpp"
#include "codiff/ops.hpp"
#include "codiff/regressor.hpp"
#include "gradcheck.hpp"

namespace codiff {
namespace {

using testing::grad_check;
using testing::probe;
using testing::random_tensor;

constexpr int kConfigs = 20;
constexpr double kTolerance = 1e-4;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

void expect_close(const testing::GradCheckResult& r, int config) {
    EXPECT_LT(r.max_rel_error, kTolerance) << "config " << config << ", worst at " << r.worst;
    EXPECT_GT(r.checked, 0u);
}

TEST(GradientCheck, Conv1d) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(100 + c);
        const std::size_t b = pick(rng, 1, 2), l = pick(rng, 1, 6), k = pick(rng, 1, 5), ci = pick(rng, 1, 3),
                          co = pick(rng, 1, 3);
        ParamStore<double> s;
        s.add("x", random_tensor({b, l, ci}, rng));
        s.add("w", random_tensor({k, ci, co}, rng));
        s.add("b", random_tensor({co}, rng));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         return probe(t, ops::conv1d(t, t.param(p, "x"), t.param(p, "w"), t.param(p, "b")), c);
                     }),
                     c);
    }
}

TEST(GradientCheck, GluAndLayerNorm) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(200 + c);
        const std::size_t rows = pick(rng, 1, 4), ch = pick(rng, 2, 5);
        ParamStore<double> s;
        s.add("x", random_tensor({rows, 2 * ch}, rng));
        s.add("gamma", random_tensor({ch}, rng));
        s.add("beta", random_tensor({ch}, rng));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var h = ops::glu(t, t.param(p, "x"));
                         return probe(t, ops::layer_norm(t, h, t.param(p, "gamma"), t.param(p, "beta")), c);
                     }),
                     c);
    }
}

TEST(GradientCheck, LinearReluExpClamp) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(300 + c);
        const std::size_t rows = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
        ParamStore<double> s;
        s.add("x", random_tensor({rows, in}, rng));
        s.add("w", random_tensor({in, out}, rng));
        s.add("b", random_tensor({out}, rng));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var h = ops::linear(t, t.param(p, "x"), t.param(p, "w"), t.param(p, "b"));
                         Var a = ops::relu(t, h);
                         Var e = ops::exp(t, ops::clamp(t, h, -1.0, 1.0));
                         return ops::add(t, probe(t, a, c), probe(t, e, c + 1000));
                     }),
                     c);
    }
}

TEST(GradientCheck, ElementwiseAndReductions) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(400 + c);
        const std::size_t rows = pick(rng, 1, 4), cols = pick(rng, 1, 4);
        ParamStore<double> s;
        s.add("a", random_tensor({rows, cols}, rng));
        s.add("b", random_tensor({rows, cols}, rng));
        s.add("c", random_tensor({rows, pick(rng, 1, 3)}, rng));
        std::vector<double> coeffs(rows);
        for (auto& v : coeffs) v = rng.normal();
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var a = t.param(p, "a"), b = t.param(p, "b");
                         Var m = ops::mul(t, ops::sub(t, a, b), ops::add(t, a, ops::scale(t, b, 0.5)));
                         Var r = ops::scale_rows(t, m, coeffs);
                         Var cat = ops::concat(t, r, t.param(p, "c"));
                         Var flat = ops::reshape(t, cat, Shape{t.value(cat).size()});
                         Var loss = ops::add(t, probe(t, flat, c), ops::mean(t, ops::mul(t, a, a)));
                         return ops::add(t, loss, ops::mean_squared_error(t, a, b));
                     }),
                     c);
    }
}

TEST(GradientCheck, FilmAndGather) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(500 + c);
        const std::size_t b = pick(rng, 1, 3), l = pick(rng, 1, 4), ch = pick(rng, 1, 4);
        const bool sequence = c % 2 == 0;
        ParamStore<double> s;
        s.add("h", sequence ? random_tensor({b, l, ch}, rng) : random_tensor({b, ch}, rng));
        s.add("scale", random_tensor({b, ch}, rng));
        s.add("shift", random_tensor({b, ch}, rng));
        std::vector<std::size_t> rows(pick(rng, 1, 5));
        for (auto& r : rows) r = rng.index(b);
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var f = ops::film_modulate(t, t.param(p, "h"), t.param(p, "scale"), t.param(p, "shift"));
                         Var g = ops::gather_rows(t, t.param(p, "scale"), rows);
                         return ops::add(t, probe(t, f, c), probe(t, g, c + 7));
                     }),
                     c);
    }
}

TEST(GradientCheck, MaxPoolMaskedAndUnmasked) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(600 + c);
        const std::size_t b = pick(rng, 1, 3), l = pick(rng, 1, 5), ch = pick(rng, 1, 4);
        ParamStore<double> s;
        s.add("x", random_tensor({b, l, ch}, rng));
        std::vector<std::uint8_t> valid(b * l);
        for (auto& v : valid) v = rng.uniform() < 0.7;
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var x = t.param(p, "x");
                         return ops::add(t, probe(t, ops::global_max_pool(t, x), c),
                                         probe(t, ops::global_max_pool(t, x, std::span<const std::uint8_t>(valid)), c + 3));
                     }),
                     c);
    }
}

TEST(GradientCheck, EmbeddingAndDropout) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(700 + c);
        const std::size_t vocab = pick(rng, 2, 6), e = pick(rng, 1, 4), b = pick(rng, 1, 3), l = pick(rng, 1, 5);
        ParamStore<double> s;
        s.add("table", random_tensor({vocab + 1, e}, rng));
        std::vector<std::int32_t> tokens(b * l);
        for (auto& t : tokens) t = static_cast<std::int32_t>(rng.index(vocab + 1));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Rng mask(42 + c);  // same mask on every evaluation
                         Var x = ops::embed_lookup(t, t.param(p, "table"), tokens, b, l);
                         return probe(t, ops::dropout(t, x, 0.3, true, mask), c);
                     }),
                     c);
    }
}

TEST(GradientCheck, GatedConvBlock) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(800 + c);
        const std::size_t b = pick(rng, 1, 2), l = pick(rng, 2, 5), ci = pick(rng, 1, 3);
        const std::size_t co = 2 * pick(rng, 1, 2);
        encoder::EncoderConfig cfg;
        cfg.vocab_size = 3;
        cfg.embed_dim = ci;
        cfg.conv_channels = {co};
        cfg.latent_dim = 2;
        cfg.kernel = pick(rng, 1, 4);
        ParamStore<double> s;
        encoder::init_params(s, "enc", cfg, rng);
        s.add("x", random_tensor({b, l, ci}, rng));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Rng drop(9 + c);
                         ForwardContext<double> ctx{t, p, drop, true, true};
                         return probe(t, encoder::gated_conv_block(ctx, "enc.block0", t.param(p, "x"), ci, co, 0.2), c);
                     }),
                     c);
    }
}

TEST(GradientCheck, EncoderWithReparameterization) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(900 + c);
        encoder::EncoderConfig cfg;
        cfg.vocab_size = pick(rng, 2, 5);
        cfg.embed_dim = pick(rng, 2, 3);
        cfg.conv_channels = {2, 4};
        cfg.kernel = pick(rng, 2, 4);
        cfg.latent_dim = pick(rng, 2, 3);
        cfg.mask_padding = c % 2 == 1;
        const std::size_t b = pick(rng, 1, 2), l = pick(rng, 3, 5);
        ParamStore<double> s;
        encoder::init_params(s, "enc", cfg, rng);
        std::vector<std::int32_t> tokens(b * l);
        for (auto& t : tokens) t = static_cast<std::int32_t>(rng.index(cfg.vocab_size + 1));
        tokens[0] = 1;
        Tensor<double> eps = random_tensor({b, cfg.latent_dim}, rng);
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Rng drop(5 + c);
                         ForwardContext<double> ctx{t, p, drop, true, true};
                         Var h = encoder::encode(ctx, "enc", cfg, tokens, b);
                         auto lat = encoder::sample_latent(ctx, "enc", cfg, h, eps);
                         return probe(t, lat.z0, c);
                     }),
                     c);
    }
}

TEST(GradientCheck, Denoiser) {
    const auto sched = diffusion::build_schedule();
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(1000 + c);
        diffusion::DenoiserConfig cfg;
        cfg.latent_dim = pick(rng, 2, 5);
        cfg.widths = {pick(rng, 2, 4), pick(rng, 1, 3)};
        cfg.time_embed_dim = 2 * pick(rng, 1, 3);
        const std::size_t b = pick(rng, 1, 3);
        ParamStore<double> s;
        diffusion::init_denoiser(s, "den", cfg, rng);
        s.add("zk", random_tensor({b, cfg.latent_dim}, rng));
        const auto k = diffusion::sample_steps(b, sched, rng);
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         ForwardContext<double> ctx{t, p, rng, true, true};
                         Var zk = t.param(p, "zk");
                         Var eps_hat = diffusion::denoise_eps(ctx, "den", cfg, zk, k);
                         Var z0 = diffusion::reconstruct_z0(t, zk, eps_hat, k, sched);
                         return ops::add(t, probe(t, z0, c), probe(t, eps_hat, c + 1));
                     }),
                     c);
    }
}

TEST(GradientCheck, RegressorHead) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(1100 + c);
        regressor::RegressorConfig cfg;
        cfg.latent_dim = pick(rng, 1, 4);
        cfg.hidden = {pick(rng, 2, 5), pick(rng, 1, 4), 1};
        const std::size_t b = pick(rng, 1, 4);
        ParamStore<double> s;
        regressor::init_params(s, "head", cfg, rng);
        s.add("zd", random_tensor({b, cfg.latent_dim}, rng));
        s.add("zt", random_tensor({b, cfg.latent_dim}, rng));
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Rng drop(3 + c);
                         ForwardContext<double> ctx{t, p, drop, true, true};
                         return probe(t, regressor::predict_affinity(ctx, "head", cfg, t.param(p, "zd"), t.param(p, "zt")),
                                      c);
                     }),
                     c);
    }
}

TEST(GradientCheck, Losses) {
    for (int c = 0; c < kConfigs; ++c) {
        Rng rng(1200 + c);
        const std::size_t b = pick(rng, 1, 5), d = pick(rng, 1, 4);
        ParamStore<double> s;
        s.add("y_hat", random_tensor({b, 1}, rng));
        s.add("eps", random_tensor({b, d}, rng));
        s.add("eps_hat", random_tensor({b, d}, rng));
        std::vector<double> y(b);
        for (auto& v : y) v = rng.normal();
        const double lambda = rng.uniform() * 2.0;
        expect_close(grad_check(s, [&](Tape<double>& t, ParamStore<double>& p) {
                         Var coreg = regressor::coreg_loss(t, y, t.param(p, "y_hat"), lambda);
                         Var diff = diffusion::diffusion_loss(t, t.param(p, "eps"), t.param(p, "eps_hat"));
                         return ops::add(t, coreg, diff);
                     }),
                     c);
    }
}

}  // namespace
}  // namespace codiff
