#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "coft/checkpoint.hpp"
#include "coft/trainer.hpp"

using namespace coft;

namespace {

ModelConfig tiny_cfg(int layers = 2) {
    ModelConfig cfg;
    cfg.vocab_size = 99;
    cfg.embed_dim = 32;
    cfg.num_heads = 2;
    cfg.ffn_dim = 64;
    cfg.num_layers = layers;
    cfg.max_seq_len = 256;
    return cfg;
}

template <typename R>
bool tensor_bit_equal(const TensorT<R>& a, const TensorT<R>& b) {
    return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(R)) == 0;
}

std::vector<Example> memorization_set(int n) {
    std::vector<Example> xs;
    SeededRng rng(77);
    std::set<std::string> seen;
    while (int(xs.size()) < n) {
        std::string key;
        for (int i = 0; i < 3; ++i) key.push_back(char('a' + rng.next_u64() % 26));
        if (!seen.insert(key).second) continue;
        std::string val;
        for (int i = 0; i < 2; ++i) val.push_back(char('a' + rng.next_u64() % 26));
        xs.push_back({"Map " + key + ".", "", val + "."});
    }
    return xs;
}

} // namespace

TEST_CASE("sft_loss") {
    // uniform logits, V=4, one scored target -> ln 4
    TensorT<float> logits({1, 4});
    auto [loss, d] = sft_loss(logits, {2}, {1});
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // dominant target logit -> loss near zero
    TensorT<float> big({1, 4});
    big.at(0, 2) = 50.0f;
    auto [loss2, d2] = sft_loss(big, {2}, {1});
    CHECK(loss2 == doctest::Approx(0.0).epsilon(1e-6));

    // two-token case against an independent recompute
    TensorT<double> l2({2, 5});
    SeededRng rng(5);
    for (auto& v : l2.data) v = rng.gaussian();
    std::vector<int> targets = {1, 3};
    auto [got, dd] = sft_loss(l2, targets, {1, 1});
    double manual = 0;
    for (int t = 0; t < 2; ++t) {
        double mx = l2.at(t, 0);
        for (int v = 1; v < 5; ++v) mx = std::max(mx, l2.at(t, v));
        double sum = 0;
        for (int v = 0; v < 5; ++v) sum += std::exp(l2.at(t, v) - mx);
        manual += -(l2.at(t, targets[size_t(t)]) - mx - std::log(sum)) / 2.0;
    }
    CHECK(got == doctest::Approx(manual).epsilon(1e-6));

    // masked positions contribute nothing and get zero gradient rows
    auto [masked_loss, dm] = sft_loss(l2, targets, {0, 1});
    for (int v = 0; v < 5; ++v) CHECK(dm.at(0, v) == 0.0);
    CHECK_THROWS_AS(sft_loss(l2, {1}, {1}), DimMismatch);
}

TEST_CASE("apply_scope expansions") {
    ModelConfig cfg = tiny_cfg(4);

    auto all = apply_scope(cfg, TuningScope{0, 4, {ModuleScope::ALL}});
    auto params = init_params<float>(cfg, SeededRng(0));
    CHECK(all.size() == params.size());
    for (const auto& [id, t] : params) CHECK(all.count(id) == 1);

    ModelConfig big = tiny_cfg(32);
    auto ffn = apply_scope(big, TuningScope{8, 16, {ModuleScope::FFN}});
    CHECK(ffn.size() == 16); // up and down of layers 9..16
    for (const auto& id : ffn) {
        CHECK(id.layer >= 9);
        CHECK(id.layer <= 16);
        CHECK(id.module == ModuleKind::FFN);
        CHECK((id.matrix == MatrixKind::Up || id.matrix == MatrixKind::Down));
    }

    auto mha = apply_scope(cfg, TuningScope{1, 3, {ModuleScope::MHA}});
    CHECK(mha.size() == 8);
    std::set<ParamId> expected;
    for (int l = 2; l <= 3; ++l)
        for (MatrixKind mk : {MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O})
            expected.insert(ParamId::block(l, ModuleKind::MHA, mk));
    CHECK(mha == expected);

    CHECK_THROWS_AS(apply_scope(cfg, TuningScope{3, 2, {ModuleScope::FFN}}), BadRange);
    CHECK_THROWS_AS(apply_scope(cfg, TuningScope{0, 9, {ModuleScope::FFN}}), BadRange);
}

TEST_CASE("lr schedule") {
    TrainConfig cfg;
    cfg.peak_lr = 2.0;
    cfg.warmup_frac = 0.1;
    const int total = 100;
    const int warmup = 10;
    CHECK(lr_at(0, total, cfg) == doctest::Approx(0.0));
    CHECK(lr_at(warmup, total, cfg) == doctest::Approx(cfg.peak_lr));
    CHECK(lr_at(total, total, cfg) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lr_at((total + warmup) / 2, total, cfg) == doctest::Approx(cfg.peak_lr * 0.5));
    CHECK(lr_at(warmup / 2, total, cfg) == doctest::Approx(cfg.peak_lr * 0.5));
}

TEST_CASE("adam: zero grads keep parameters, trajectory matches the recurrence") {
    ModelConfig cfg = tiny_cfg(1);
    auto params = init_params<float>(cfg, SeededRng(4));
    auto before = params;
    std::set<ParamId> trainable{ParamId::embed()};
    AdamStateT<float> st;
    GradsT<float> zeros;
    zeros.emplace(ParamId::embed(), TensorT<float>(params.at(ParamId::embed()).shape));
    adam_step(params, zeros, st, trainable, 0.1);
    CHECK(tensor_bit_equal(params.at(ParamId::embed()), before.at(ParamId::embed())));

    // single-scalar trajectory against the hand recurrence
    TensorT<double> w({1}, {1.0});
    TensorT<double> m({1}), v({1});
    const std::vector<double> gs = {0.5, -0.2, 0.1};
    double hw = 1.0, hm = 0.0, hv = 0.0;
    for (int t = 1; t <= 3; ++t) {
        TensorT<double> g({1}, {gs[size_t(t - 1)]});
        detail::adam_update_tensor(w, g, m, v, t, 0.1);
        hm = 0.9 * hm + 0.1 * gs[size_t(t - 1)];
        hv = 0.999 * hv + 0.001 * gs[size_t(t - 1)] * gs[size_t(t - 1)];
        const double mhat = hm / (1.0 - std::pow(0.9, t));
        const double vhat = hv / (1.0 - std::pow(0.999, t));
        hw -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(w.data[0] == doctest::Approx(hw).epsilon(1e-12));
    }

    GradsT<float> extra = zeros;
    extra.emplace(ParamId::lm_head(), TensorT<float>(params.at(ParamId::lm_head()).shape));
    CHECK_THROWS_AS(adam_step(params, extra, st, trainable, 0.1), MissingGrad);
    GradsT<float> missing;
    CHECK_THROWS_AS(adam_step(params, missing, st, trainable, 0.1), MissingGrad);
}

TEST_CASE("regularizer gradients") {
    ModelConfig cfg = tiny_cfg(1);
    auto pre = init_params<float>(cfg, SeededRng(5));
    auto cur = pre;

    GradsT<float> g;
    g.emplace(ParamId::embed(), TensorT<float>(cur.at(ParamId::embed()).shape));
    regularized_grads(g, cur, pre, Method::L2, 0.001);
    for (float v : g.at(ParamId::embed()).data) CHECK(v == 0.0f);
    regularized_grads(g, cur, pre, Method::L1, 0.001);
    for (float v : g.at(ParamId::embed()).data) CHECK(v == 0.0f); // sign(0) == 0

    cur.at(ParamId::embed()).data[0] += 5.0f;
    GradsT<float> g2;
    g2.emplace(ParamId::embed(), TensorT<float>(cur.at(ParamId::embed()).shape));
    regularized_grads(g2, cur, pre, Method::L2, 0.001);
    CHECK(g2.at(ParamId::embed()).data[0] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("regularized loss matches finite differences in f64") {
    ModelConfig cfg = tiny_cfg(1);
    auto pre = init_params<double>(cfg, SeededRng(6));
    auto cur = pre;
    SeededRng noise(7);
    for (auto& [id, t] : cur)
        for (auto& v : t.data) v += 0.05 * noise.gaussian();

    std::vector<int> toks = {1, 5, 9, 3};
    const double lam = 0.001;
    auto full_loss = [&](const ParamsT<double>& p, Method m) {
        auto [logits, trace] = forward(cfg, p, toks, Mode::Eval, SeededRng(0));
        std::vector<int> targets(toks.begin() + 1, toks.end());
        targets.push_back(2);
        auto [l, d] = sft_loss(logits, targets, std::vector<char>(targets.size(), 1));
        double pen = 0;
        for (const auto& [id, t] : p) {
            const auto& ref = pre.at(id);
            for (int64_t i = 0; i < t.numel(); ++i) {
                const double delta = t.data[size_t(i)] - ref.data[size_t(i)];
                pen += m == Method::L2 ? delta * delta : std::abs(delta);
            }
        }
        return l + lam * pen;
    };

    for (Method m : {Method::L1, Method::L2}) {
        auto [logits, trace] = forward(cfg, cur, toks, Mode::Eval, SeededRng(0));
        std::vector<int> targets(toks.begin() + 1, toks.end());
        targets.push_back(2);
        auto [l, d_logits] = sft_loss(logits, targets, std::vector<char>(targets.size(), 1));
        auto bw = backward(trace, d_logits);
        regularized_grads(bw.param_grads, cur, pre, m, lam);

        SeededRng pick(9);
        for (int rep = 0; rep < 6; ++rep) {
            const ParamId id = ParamId::block(1, ModuleKind::FFN, MatrixKind::Up);
            auto& g = bw.param_grads.at(id);
            int64_t idx = int64_t(pick.next_u64() % uint64_t(g.numel()));
            const double eps = 1e-6;
            auto p2 = cur;
            p2.at(id).data[size_t(idx)] += eps;
            double lp = full_loss(p2, m);
            p2.at(id).data[size_t(idx)] -= 2 * eps;
            double lm_ = full_loss(p2, m);
            double fd = (lp - lm_) / (2 * eps);
            CHECK(std::abs(fd - g.data[size_t(idx)]) / std::max({std::abs(fd), std::abs(g.data[size_t(idx)]), 1e-8}) <
                  1e-6);
        }
    }
}

TEST_CASE("wise-ft interpolation identities") {
    ModelConfig cfg = tiny_cfg(1);
    auto theta = init_params<float>(cfg, SeededRng(8));
    auto theta_hat = init_params<float>(cfg, SeededRng(9));

    auto a0 = wise_ft_interpolate(theta, theta_hat, 0.0);
    auto a1 = wise_ft_interpolate(theta, theta_hat, 1.0);
    for (const auto& [id, t] : theta) CHECK(tensor_bit_equal(a0.at(id), t));
    for (const auto& [id, t] : theta_hat) CHECK(tensor_bit_equal(a1.at(id), t));

    ParamsT<float> two, four;
    two.emplace(ParamId::embed(), TensorT<float>({1, 1}, {2.0f}));
    four.emplace(ParamId::embed(), TensorT<float>({1, 1}, {4.0f}));
    CHECK(wise_ft_interpolate(two, four, 0.5).at(ParamId::embed()).data[0] == doctest::Approx(3.0));

    auto mid = wise_ft_interpolate(theta, theta_hat, 0.5);
    for (const auto& [id, t] : theta)
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(mid.at(id).data[size_t(i)] ==
                  doctest::Approx(0.5 * (t.data[size_t(i)] + theta_hat.at(id).data[size_t(i)])).epsilon(1e-6));

    CHECK_THROWS_AS(wise_ft_interpolate(theta, theta_hat, 1.5), BadConfig);
    ParamsT<float> short_set = theta;
    short_set.erase(ParamId::embed());
    CHECK_THROWS_AS(wise_ft_interpolate(theta, short_set, 0.5), ShapeMismatch);
}

TEST_CASE("lora: attach neutrality, factored-path equivalence, merge") {
    ModelConfig cfg = tiny_cfg(2);
    auto params = init_params<float>(cfg, SeededRng(10));
    CHECK_THROWS_AS(lora_attach(cfg, params, 5, SeededRng(0)), BadRank);

    auto adapter = lora_attach(cfg, params, 4, SeededRng(11));
    CHECK(adapter.alpha / adapter.rank == doctest::Approx(2.0));

    // B == 0: effective weights equal base weights exactly
    auto eff0 = lora_effective(params, adapter);
    for (const auto& [id, t] : params) CHECK(tensor_bit_equal(eff0.at(id), t));
    std::vector<int> toks = {1, 9, 4, 30};
    auto [l0, tr0] = forward(cfg, params, toks, Mode::Eval, SeededRng(0));
    auto [l1, tr1] = forward(cfg, eff0, toks, Mode::Eval, SeededRng(0));
    CHECK(std::memcmp(l0.data.data(), l1.data.data(), l0.data.size() * 4) == 0);

    // random nonzero factors: merged weight equals the factored route x W + s (x A^T) B^T
    SeededRng rng(12);
    for (auto& [id, ab] : adapter.ab) {
        for (auto& v : ab.first.data) v = float(0.05 * rng.gaussian());
        for (auto& v : ab.second.data) v = float(0.05 * rng.gaussian());
    }
    auto merged = lora_merge(params, adapter);
    const float s = float(adapter.alpha / adapter.rank);
    for (const auto& [id, ab] : adapter.ab) {
        Tensor x({3, params.at(id).rows()});
        for (auto& v : x.data) v = float(rng.gaussian());
        Tensor direct = matmul(x, merged.at(id));
        Tensor base = matmul(x, params.at(id));
        Tensor low = matmul(matmul(x, transpose(ab.first)), transpose(ab.second));
        for (int64_t i = 0; i < direct.numel(); ++i)
            CHECK(direct.data[size_t(i)] ==
                  doctest::Approx(base.data[size_t(i)] + s * low.data[size_t(i)]).epsilon(1e-5));
    }

    // non-target tensors never change under merge
    for (const auto& [id, t] : params)
        if (!adapter.ab.count(id)) CHECK(tensor_bit_equal(merged.at(id), t));
}

TEST_CASE("train: zero epochs, freeze soundness, determinism") {
    ModelConfig cfg = tiny_cfg(2);
    auto base = init_params<float>(cfg, SeededRng(13));
    Vocabulary vocab;
    auto data = memorization_set(8);

    TrainConfig tcfg;
    tcfg.epochs = 0;
    TuningScope scope{0, 2, {ModuleScope::ALL}};
    auto r0 = train(cfg, base, data, vocab, tcfg, scope);
    for (const auto& [id, t] : base) CHECK(tensor_bit_equal(r0.params.at(id), t));

    tcfg.epochs = 2;
    tcfg.peak_lr = 1e-3;
    tcfg.seed = 5;
    TuningScope ffn_scope{1, 2, {ModuleScope::FFN}};
    auto r1 = train(cfg, base, data, vocab, tcfg, ffn_scope);
    auto trainable = apply_scope(cfg, ffn_scope);
    int changed = 0;
    for (const auto& [id, t] : base) {
        if (trainable.count(id)) {
            if (!tensor_bit_equal(r1.params.at(id), t)) ++changed;
        } else {
            CHECK(tensor_bit_equal(r1.params.at(id), t));
        }
    }
    CHECK(changed == int(trainable.size()));
    CHECK(r1.log.size() == size_t(2 * ((8 + tcfg.batch_size - 1) / tcfg.batch_size)));

    auto r2 = train(cfg, base, data, vocab, tcfg, ffn_scope);
    for (const auto& [id, t] : r1.params) CHECK(tensor_bit_equal(r2.params.at(id), t));
}

TEST_CASE("train memorizes a small set and greedy decoding reproduces it") {
    ModelConfig cfg = tiny_cfg(2);
    auto base = init_params<float>(cfg, SeededRng(14));
    Vocabulary vocab;
    auto data = memorization_set(50);

    TrainConfig tcfg;
    tcfg.epochs = 30;
    tcfg.batch_size = 8;
    tcfg.peak_lr = 3e-3;
    tcfg.seed = 3;
    TuningScope scope{0, 2, {ModuleScope::ALL}};
    auto res = train(cfg, base, data, vocab, tcfg, scope);
    CHECK(res.log.back().loss < 0.05);

    // the overfit model reproduces a memorized completion exactly
    const Example& e = data[3];
    std::vector<int> prompt;
    prompt.push_back(Vocabulary::kBos);
    auto ids = vocab.tokenize(build_prompt(e, false));
    prompt.insert(prompt.end(), ids.begin(), ids.end());
    auto out = decode_greedy(cfg, res.params, prompt, 12, Vocabulary::kEos);
    CHECK(vocab.detokenize(out) == e.output);
}
