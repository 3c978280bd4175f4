#pragma once

#include <set>
#include <string>

#include "coft/model.hpp"

namespace coft {

// Module selector for a tuning scope. FFN deliberately expands to up_proj
// and down_proj only (the SwiGLU gate projection stays frozen); ALL covers
// every parameter including embeddings, norms and the LM head.
enum class ModuleScope : uint8_t { MHA = 0, FFN = 1, UP = 2, DOWN = 3, ALL = 4 };

inline const char* module_scope_name(ModuleScope m) {
    switch (m) {
        case ModuleScope::MHA: return "MHA";
        case ModuleScope::FFN: return "FFN";
        case ModuleScope::UP: return "UP";
        case ModuleScope::DOWN: return "DOWN";
        default: return "ALL";
    }
}

// Layer range (a, b] (1-based layers a+1..b) plus a module-kind set.
struct TuningScope {
    int range_a = 0;
    int range_b = 0;
    std::set<ModuleScope> modules;

    std::string str() const {
        std::string s = std::to_string(range_a) + ":" + std::to_string(range_b) + ":";
        bool first = true;
        for (auto m : modules) {
            if (!first) s += "+";
            s += module_scope_name(m);
            first = false;
        }
        return s;
    }

    static TuningScope parse(const std::string& text);
};

inline TuningScope TuningScope::parse(const std::string& text) {
    TuningScope sc;
    size_t c1 = text.find(':'), c2 = text.find(':', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
        throw BadScope("expected a:b:MODS, got '" + text + "'");
    try {
        sc.range_a = std::stoi(text.substr(0, c1));
        sc.range_b = std::stoi(text.substr(c1 + 1, c2 - c1 - 1));
    } catch (const std::exception&) {
        throw BadScope("bad layer range in '" + text + "'");
    }
    std::string mods = text.substr(c2 + 1);
    size_t pos = 0;
    while (pos != std::string::npos) {
        size_t plus = mods.find('+', pos);
        std::string tok = mods.substr(pos, plus == std::string::npos ? std::string::npos : plus - pos);
        if (tok == "MHA") sc.modules.insert(ModuleScope::MHA);
        else if (tok == "FFN") sc.modules.insert(ModuleScope::FFN);
        else if (tok == "UP") sc.modules.insert(ModuleScope::UP);
        else if (tok == "DOWN") sc.modules.insert(ModuleScope::DOWN);
        else if (tok == "ALL") sc.modules.insert(ModuleScope::ALL);
        else throw BadScope("unknown module '" + tok + "' in '" + text + "'");
        pos = plus == std::string::npos ? plus : plus + 1;
    }
    if (sc.modules.empty()) throw BadScope("no modules in '" + text + "'");
    return sc;
}

// Expand a scope into the exact trainable ParamId set. Norms, embeddings and
// the LM head are trainable only under ALL.
inline std::set<ParamId> apply_scope(const ModelConfig& cfg, const TuningScope& scope) {
    if (scope.modules.empty()) throw BadScope("empty module set");
    if (scope.range_a < 0 || scope.range_b > cfg.num_layers || scope.range_a >= scope.range_b)
        throw BadRange("scope (" + std::to_string(scope.range_a) + "," + std::to_string(scope.range_b) +
                       "] invalid for N=" + std::to_string(cfg.num_layers));
    std::set<ParamId> out;
    const bool all = scope.modules.count(ModuleScope::ALL) > 0;
    for (int l = scope.range_a + 1; l <= scope.range_b; ++l) {
        auto add_mha = [&] {
            out.insert(ParamId::block(l, ModuleKind::MHA, MatrixKind::Q));
            out.insert(ParamId::block(l, ModuleKind::MHA, MatrixKind::K));
            out.insert(ParamId::block(l, ModuleKind::MHA, MatrixKind::V));
            out.insert(ParamId::block(l, ModuleKind::MHA, MatrixKind::O));
        };
        if (all) {
            add_mha();
            out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Gate));
            out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up));
            out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down));
            out.insert(ParamId::block(l, ModuleKind::Norm1, MatrixKind::Weight));
            out.insert(ParamId::block(l, ModuleKind::Norm2, MatrixKind::Weight));
            continue;
        }
        for (ModuleScope m : scope.modules) {
            switch (m) {
                case ModuleScope::MHA: add_mha(); break;
                case ModuleScope::FFN:
                    out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up));
                    out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down));
                    break;
                case ModuleScope::UP: out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up)); break;
                case ModuleScope::DOWN: out.insert(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down)); break;
                default: break;
            }
        }
    }
    if (all) {
        out.insert(ParamId::embed());
        out.insert(ParamId::lm_head());
        out.insert(ParamId::final_norm());
    }
    return out;
}

} // namespace coft
