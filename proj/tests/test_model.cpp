#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "coft/model.hpp"

using namespace coft;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    cfg.num_layers = 2;
    cfg.max_seq_len = 32;
    return cfg;
}

template <typename R>
bool params_bit_equal(const ParamsT<R>& a, const ParamsT<R>& b) {
    if (a.size() != b.size()) return false;
    auto it1 = a.begin();
    auto it2 = b.begin();
    for (; it1 != a.end(); ++it1, ++it2) {
        if (!(it1->first == it2->first)) return false;
        if (it1->second.shape != it2->second.shape) return false;
        if (std::memcmp(it1->second.data.data(), it2->second.data.data(), it1->second.data.size() * sizeof(R)) != 0)
            return false;
    }
    return true;
}

// all layer weights zero, final norm one: every block is the identity map
ParamsT<float> passthrough_params(const ModelConfig& cfg) {
    auto p = init_params<float>(cfg, SeededRng(0));
    for (auto& [id, t] : p)
        std::fill(t.data.begin(), t.data.end(), 0.0f);
    std::fill(p.at(ParamId::final_norm()).data.begin(), p.at(ParamId::final_norm()).data.end(), 1.0f);
    return p;
}

} // namespace

TEST_CASE("init_params determinism and statistics") {
    ModelConfig cfg = tiny_cfg();
    cfg.embed_dim = 64;
    cfg.ffn_dim = 128;
    cfg.num_heads = 4;
    auto p1 = init_params<float>(cfg, SeededRng(42));
    auto p2 = init_params<float>(cfg, SeededRng(42));
    CHECK(params_bit_equal(p1, p2));

    for (float v : p1.at(ParamId::block(1, ModuleKind::Norm1, MatrixKind::Weight)).data) CHECK(v == 1.0f);
    for (float v : p1.at(ParamId::final_norm()).data) CHECK(v == 1.0f);

    const auto& q = p1.at(ParamId::block(1, ModuleKind::MHA, MatrixKind::Q));
    double mean = 0;
    for (float v : q.data) mean += v;
    mean /= double(q.numel());
    CHECK(std::abs(mean) < 3.0 * 0.02 / std::sqrt(double(q.numel())));
}

TEST_CASE("forward validates tokens and length") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(1));
    CHECK_THROWS_AS(forward(cfg, p, {0, 25}, Mode::Eval, SeededRng(0)), TokenOutOfRange);
    std::vector<int> long_seq(40, 1);
    CHECK_THROWS_AS(forward(cfg, p, long_seq, Mode::Eval, SeededRng(0)), SeqTooLong);
}

TEST_CASE("gate and dropout neutrality") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(3));
    std::vector<int> toks = {1, 4, 9, 2, 7};

    auto [eval_logits, t0] = forward(cfg, p, toks, Mode::Eval, SeededRng(5));
    auto [train_logits, t1] = forward(cfg, p, toks, Mode::Train, SeededRng(5));
    CHECK(std::memcmp(eval_logits.data.data(), train_logits.data.data(), eval_logits.data.size() * 4) == 0);

    std::vector<ModuleRef> mods;
    for (int l = 1; l <= cfg.num_layers; ++l) {
        mods.push_back({l, ModuleKind::MHA});
        mods.push_back({l, ModuleKind::FFN});
    }
    GateSetT<float> gates = make_unit_gates<float>(cfg, mods);
    auto [gated_logits, t2] = forward(cfg, p, toks, Mode::Eval, &gates, SeededRng(5));
    CHECK(std::memcmp(eval_logits.data.data(), gated_logits.data.data(), eval_logits.data.size() * 4) == 0);
}

TEST_CASE("causality: permuting future tokens leaves prefix logits unchanged") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(4));
    std::vector<int> toks = {1, 5, 9, 3, 17, 2, 11, 8};
    std::vector<int> perm = toks;
    std::swap(perm[5], perm[7]);
    std::swap(perm[6], perm[5]);

    auto [l1, tr1] = forward(cfg, p, toks, Mode::Eval, SeededRng(0));
    auto [l2, tr2] = forward(cfg, p, perm, Mode::Eval, SeededRng(0));
    for (int64_t t = 0; t <= 4; ++t)
        CHECK(std::memcmp(l1.row_ptr(t), l2.row_ptr(t), size_t(cfg.vocab_size) * 4) == 0);
}

TEST_CASE("forward determinism in train mode") {
    ModelConfig cfg = tiny_cfg();
    cfg.dropout_p = 0.2;
    auto p = init_params<float>(cfg, SeededRng(6));
    std::vector<int> toks = {1, 2, 3, 4, 5, 6};
    auto [a, ta] = forward(cfg, p, toks, Mode::Train, SeededRng(9, 2));
    auto [b, tb] = forward(cfg, p, toks, Mode::Train, SeededRng(9, 2));
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) == 0);
    auto [c, tc] = forward(cfg, p, toks, Mode::Train, SeededRng(9, 3));
    bool differs = std::memcmp(a.data.data(), c.data.data(), a.data.size() * 4) != 0;
    CHECK(differs);
}

TEST_CASE("backward: zero upstream gradient gives zero everywhere") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(8));
    std::vector<int> toks = {1, 2, 3, 4};
    std::vector<ModuleRef> mods{{1, ModuleKind::FFN}, {2, ModuleKind::MHA}};
    GateSetT<float> gates = make_unit_gates<float>(cfg, mods);
    auto [logits, trace] = forward(cfg, p, toks, Mode::Eval, &gates, SeededRng(0));
    TensorT<float> zeros({logits.rows(), logits.cols()});
    auto bw = backward(trace, zeros);
    for (const auto& [id, g] : bw.param_grads)
        for (float v : g.data) CHECK(v == 0.0f);
    for (const auto& [m, g] : bw.gate_grads)
        for (float v : g) CHECK(v == 0.0f);
}

TEST_CASE("gate gradient of a disconnected FFN neuron is exactly zero") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(9));
    const int64_t neuron = 5;
    auto& down = p.at(ParamId::block(1, ModuleKind::FFN, MatrixKind::Down));
    for (int64_t j = 0; j < down.cols(); ++j) down.at(neuron, j) = 0.0f;

    std::vector<ModuleRef> mods{{1, ModuleKind::FFN}};
    GateSetT<float> gates = make_unit_gates<float>(cfg, mods);
    std::vector<int> toks = {1, 7, 3, 11};
    auto [logits, trace] = forward(cfg, p, toks, Mode::Eval, &gates, SeededRng(0));
    TensorT<float> d_logits({logits.rows(), logits.cols()});
    SeededRng r(10);
    for (auto& v : d_logits.data) v = float(r.gaussian());
    auto bw = backward(trace, d_logits);
    CHECK(bw.gate_grads.at(ModuleRef{1, ModuleKind::FFN})[size_t(neuron)] == 0.0f);
}

TEST_CASE("trace mismatch is rejected") {
    ModelConfig cfg = tiny_cfg();
    auto p = init_params<float>(cfg, SeededRng(11));
    auto [logits, trace] = forward(cfg, p, {1, 2, 3}, Mode::Eval, SeededRng(0));
    TensorT<float> wrong({2, cfg.vocab_size});
    CHECK_THROWS_AS(backward(trace, wrong), TraceMismatch);
}

TEST_CASE("f64 gradcheck on a small model (params and gates)") {
    ModelConfig cfg = tiny_cfg();
    cfg.dropout_p = 0.2;
    auto params = init_params<double>(cfg, SeededRng(42));
    // scale weights up so gradients clear the finite-difference noise floor
    for (auto& [id, t] : params)
        if (id.matrix != MatrixKind::Weight)
            for (auto& v : t.data) v *= 12.0;

    std::vector<int> toks = {1, 5, 9, 3, 17, 2};
    std::vector<ModuleRef> mods;
    for (int l = 1; l <= cfg.num_layers; ++l) {
        mods.push_back({l, ModuleKind::MHA});
        mods.push_back({l, ModuleKind::FFN});
    }
    GateSetT<double> gates = make_unit_gates<double>(cfg, mods);
    SeededRng gr(7);
    for (auto& [m, g] : gates.gates)
        for (auto& v : g) v = 0.5 + gr.uniform();

    const uint64_t stream = 77;
    auto loss_of = [&](const ParamsT<double>& p, const GateSetT<double>& g, TensorD* dlog) {
        auto [logits, trace] = forward(cfg, p, toks, Mode::Train, &g, SeededRng(123, stream));
        const int64_t T = logits.rows(), V = logits.cols();
        double total = 0;
        TensorD d({T, V});
        const double inv = 1.0 / double(T - 1);
        for (int64_t t = 0; t + 1 < T; ++t) {
            int target = toks[size_t(t + 1)];
            const double* row = logits.row_ptr(t);
            double mx = row[0];
            for (int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
            double sum = 0;
            for (int64_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
            total += -(row[target] - mx - std::log(sum)) * inv;
            for (int64_t v = 0; v < V; ++v) d.at(t, v) = std::exp(row[v] - mx) / sum * inv;
            d.at(t, target) -= inv;
        }
        if (dlog) *dlog = d;
        return total;
    };

    TensorD d_logits;
    loss_of(params, gates, &d_logits);
    auto [logits, trace] = forward(cfg, params, toks, Mode::Train, &gates, SeededRng(123, stream));
    auto bw = backward(trace, d_logits);

    SeededRng pick(99);
    const double eps = 1e-5;
    int checked = 0;
    for (auto& [id, g] : bw.param_grads) {
        for (int rep = 0; rep < 2; ++rep) {
            int64_t idx = int64_t(pick.next_u64() % uint64_t(g.numel()));
            auto pp = params;
            pp.at(id).data[size_t(idx)] += eps;
            double lp = loss_of(pp, gates, nullptr);
            pp.at(id).data[size_t(idx)] -= 2 * eps;
            double lm = loss_of(pp, gates, nullptr);
            double fd = (lp - lm) / (2 * eps);
            double an = g.data[size_t(idx)];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-10});
            if (std::abs(fd) < 1e-8 && std::abs(an) < 1e-8) rel = 0;
            INFO(id.name(), "[", idx, "] fd=", fd, " an=", an);
            CHECK(rel < 1e-6);
            ++checked;
        }
    }
    for (auto& [m, gg] : bw.gate_grads) {
        for (int rep = 0; rep < 3; ++rep) {
            size_t idx = size_t(pick.next_u64() % gg.size());
            auto g2 = gates;
            g2.gates.at(m)[idx] += eps;
            double lp = loss_of(params, g2, nullptr);
            g2.gates.at(m)[idx] -= 2 * eps;
            double lm = loss_of(params, g2, nullptr);
            double fd = (lp - lm) / (2 * eps);
            double an = gg[idx];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-10});
            if (std::abs(fd) < 1e-8 && std::abs(an) < 1e-8) rel = 0;
            INFO(m.name(), "[", idx, "] fd=", fd, " an=", an);
            CHECK(rel < 1e-6);
            ++checked;
        }
    }
    CHECK(checked >= 50);
}

TEST_CASE("greedy decode follows a biased lm head and the tie rule") {
    ModelConfig cfg = tiny_cfg();
    auto p = passthrough_params(cfg);
    // constant positive embedding, lm head pointing at token 3
    auto& embed = p.at(ParamId::embed());
    std::fill(embed.data.begin(), embed.data.end(), 1.0f);
    auto& lm = p.at(ParamId::lm_head());
    for (int64_t i = 0; i < lm.rows(); ++i) lm.at(i, 3) = 1.0f;

    auto out = decode_greedy(cfg, p, {1, 2}, 5, /*eos=*/19);
    CHECK(out == std::vector<int>({3, 3, 3, 3, 3}));

    // all-zero lm head: exact ties, lowest token id wins
    std::fill(lm.data.begin(), lm.data.end(), 0.0f);
    auto tie = decode_greedy(cfg, p, {1, 2}, 3, /*eos=*/5);
    CHECK(tie == std::vector<int>({0, 0, 0}));

    // eos stops decoding and is not emitted
    for (int64_t i = 0; i < lm.rows(); ++i) lm.at(i, 7) = 1.0f;
    auto stopped = decode_greedy(cfg, p, {1, 2}, 5, /*eos=*/7);
    CHECK(stopped.empty());
}

TEST_CASE("log likelihood: uniform model, chain rule, naive recompute") {
    ModelConfig cfg = tiny_cfg();
    auto p = passthrough_params(cfg);
    auto& embed = p.at(ParamId::embed());
    std::fill(embed.data.begin(), embed.data.end(), 0.5f);
    // lm head all zero -> uniform distribution
    double ll = log_likelihood(cfg, p, {1, 2}, {3, 4, 5});
    CHECK(ll == doctest::Approx(-3.0 * std::log(20.0)).epsilon(1e-6));

    auto pr = init_params<double>(cfg, SeededRng(19));
    ModelConfig dcfg = cfg;
    std::vector<int> ctx = {1, 4};
    std::vector<int> a = {7, 9};
    std::vector<int> b = {2, 11};
    std::vector<int> ab = {7, 9, 2, 11};
    std::vector<int> ctx_a = {1, 4, 7, 9};
    double lhs = log_likelihood(dcfg, pr, ctx, ab);
    double rhs = log_likelihood(dcfg, pr, ctx, a) + log_likelihood(dcfg, pr, ctx_a, b);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));

    // independent recompute from raw logits
    std::vector<int> full = ctx;
    full.insert(full.end(), ab.begin(), ab.end());
    auto [logits, trace] = forward(dcfg, pr, full, Mode::Eval, SeededRng(0));
    double manual = 0;
    for (size_t j = 0; j < ab.size(); ++j) {
        const double* row = logits.row_ptr(int64_t(ctx.size() + j) - 1);
        double mx = row[0];
        for (int v = 1; v < cfg.vocab_size; ++v) mx = std::max(mx, row[v]);
        double sum = 0;
        for (int v = 0; v < cfg.vocab_size; ++v) sum += std::exp(row[v] - mx);
        manual += row[ab[j]] - mx - std::log(sum);
    }
    CHECK(lhs == doctest::Approx(manual).epsilon(1e-6));

    CHECK_THROWS_AS(log_likelihood(cfg, p, {1}, {}), TokenOutOfRange);
}
