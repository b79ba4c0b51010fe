#include "vinpaint/merge.hpp"

#include <cmath>
#include <regex>
#include <set>
#include <sstream>

#include "vinpaint/error.hpp"

namespace vinpaint::merge {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

Checkpoint pad_input_channels(const Checkpoint& ckpt, const std::string& layer, std::size_t from, std::size_t to,
                              std::size_t axis) {
    auto it = ckpt.find(layer);
    if (it == ckpt.end()) throw MergeError(layer, "no such tensor to pad");
    const TensorF& w = it->second;
    if (axis >= w.rank() || w.dim(static_cast<long>(axis)) != from) {
        throw ShapeError(layer + ": expected " + std::to_string(from) + " channels on axis " + std::to_string(axis) +
                         ", shape is " + shape_str(w.shape()));
    }
    if (to < from) throw std::invalid_argument("padding cannot shrink a layer");
    Shape padded_shape = w.shape();
    padded_shape[axis] = to;
    TensorF padded(padded_shape);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= w.shape()[i];
    for (std::size_t i = axis + 1; i < w.rank(); ++i) inner *= w.shape()[i];
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < from; ++c)
            for (std::size_t i = 0; i < inner; ++i) padded[(o * to + c) * inner + i] = w[(o * from + c) * inner + i];
    Checkpoint out = ckpt;
    out.at(layer) = std::move(padded);
    return out;
}

std::string KeyReport::to_text() const {
    std::ostringstream os;
    for (const auto& k : only_in_first) os << "only_in_first " << k << '\n';
    for (const auto& k : only_in_second) os << "only_in_second " << k << '\n';
    return os.str();
}

KeyReport compare_keys(const Checkpoint& a, const Checkpoint& b) {
    KeyReport r;
    for (const auto& [k, v] : a)
        if (!b.count(k)) r.only_in_first.push_back(k);
    for (const auto& [k, v] : b)
        if (!a.count(k)) r.only_in_second.push_back(k);
    return r;
}

TaskVector task_vector(const Checkpoint& a, const Checkpoint& b) {
    TaskVector tv;
    tv.unmatched = compare_keys(a, b);
    for (const auto& [name, ta] : a) {
        auto it = b.find(name);
        if (it == b.end()) continue;
        const TensorF& tb = it->second;
        if (ta.shape() != tb.shape()) {
            throw MergeError(name, "shape " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        }
        TensorF d(ta.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = ta[i] - tb[i];
        tv.delta.emplace(name, std::move(d));
    }
    return tv;
}

std::vector<std::string> MergeRecipe::warnings() const {
    std::vector<std::string> w;
    if (!(alpha >= 0.5 && alpha <= 1.5)) w.push_back("alpha " + fmt(alpha) + " is outside the recommended [0.5, 1.5]");
    if (!(beta >= 1.0 && beta <= 2.0)) w.push_back("beta " + fmt(beta) + " is outside the recommended [1, 2]");
    return w;
}

MergeResult merge(const Checkpoint& base, const Checkpoint& tau_ip, const Checkpoint& tau_p,
                  const MergeRecipe& recipe) {
    if (!std::isfinite(recipe.alpha) || !std::isfinite(recipe.beta)) {
        throw std::invalid_argument("alpha and beta must be finite");
    }
    MergeResult r;
    r.warnings = recipe.warnings();
    std::set<std::string> all;
    for (const auto* c : {&base, &tau_ip, &tau_p})
        for (const auto& [k, v] : *c) all.insert(k);
    for (const auto& name : all) {
        auto b = base.find(name), i = tau_ip.find(name), p = tau_p.find(name);
        if (b == base.end() || i == tau_ip.end() || p == tau_p.end()) {
            r.unmatched.push_back(name);
            continue;
        }
        const Shape& s = b->second.shape();
        if (i->second.shape() != s || p->second.shape() != s) {
            throw MergeError(name, "shapes disagree: base " + shape_str(s) + ", tau_ip " +
                                       shape_str(i->second.shape()) + ", tau_p " + shape_str(p->second.shape()));
        }
        TensorF out(s);
        for (std::size_t e = 0; e < out.size(); ++e) {
            out[e] = static_cast<float>(static_cast<double>(b->second[e]) + recipe.alpha * i->second[e] +
                                        recipe.beta * p->second[e]);
        }
        r.merged.emplace(name, std::move(out));
    }
    return r;
}

const char* to_string(LayerType t) {
    switch (t) {
        case LayerType::conv: return "conv";
        case LayerType::query: return "query";
        case LayerType::key: return "key";
        case LayerType::value: return "value";
        case LayerType::out_proj: return "out";
        case LayerType::ffn: return "ffn";
    }
    return "unknown";
}

const char* to_string(Region r) {
    switch (r) {
        case Region::down: return "down";
        case Region::middle: return "middle";
        case Region::up: return "up";
    }
    return "unknown";
}

LayerClassifier LayerClassifier::defaults() {
    return {{{R"((^|\.)to_q(\.|$))", LayerType::query},
             {R"((^|\.)to_k(\.|$))", LayerType::key},
             {R"((^|\.)to_v(\.|$))", LayerType::value},
             {R"((^|\.)to_out(\.|$))", LayerType::out_proj},
             {R"((^|\.)(ff|ffn)(\.|$))", LayerType::ffn},
             {R"(conv)", LayerType::conv}},
            {{R"((^|\.)down_blocks(\.|$))", Region::down},
             {R"((^|\.)mid_block(\.|$))", Region::middle},
             {R"((^|\.)up_blocks(\.|$))", Region::up}}};
}

namespace {

template <typename E>
std::optional<E> first_match(const std::vector<std::pair<std::string, E>>& rules, const std::string& name) {
    for (const auto& [pattern, label] : rules) {
        if (std::regex_search(name, std::regex(pattern))) return label;
    }
    return std::nullopt;
}

}  // namespace

std::optional<LayerType> LayerClassifier::type_of(const std::string& name) const {
    return first_match(type_rules, name);
}

std::optional<Region> LayerClassifier::region_of(const std::string& name) const {
    return first_match(region_rules, name);
}

std::optional<double> cosine_similarity(const TensorF& a, const TensorF& b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine of tensors with " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                         " elements");
    }
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) return std::nullopt;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

const SimilarityCell& SimilarityReport::cell(LayerType t, Region r) const {
    for (const auto& c : cells)
        if (c.type == t && c.region == r) return c;
    throw std::out_of_range("no such similarity cell");
}

std::size_t SimilarityReport::populated_cells() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.tensors > 0;
    return n;
}

std::string SimilarityReport::to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "type,region,tensors,undefined,mean\n";
    for (const auto& c : cells) {
        os << to_string(c.type) << ',' << to_string(c.region) << ',' << c.tensors << ',' << c.undefined << ',';
        if (c.mean) os << *c.mean;
        else os << "undefined";
        os << '\n';
    }
    return os.str();
}

SimilarityReport layer_similarity_report(const Checkpoint& a, const Checkpoint& b, const LayerClassifier& classifier) {
    SimilarityReport r;
    r.unmatched = compare_keys(a, b);
    for (const auto& [name, ta] : a) {
        auto it = b.find(name);
        if (it == b.end()) continue;
        if (ta.shape() != it->second.shape()) throw MergeError(name, "shapes differ between checkpoints");
        r.tensors.push_back({name, cosine_similarity(ta, it->second), classifier.type_of(name), classifier.region_of(name)});
    }
    if (r.tensors.empty()) throw MergeError("", "checkpoints share no tensors");
    for (LayerType t : kLayerTypes) {
        for (Region g : kRegions) {
            SimilarityCell c{t, g, std::nullopt, 0, 0};
            double sum = 0;
            std::size_t defined = 0;
            for (const auto& s : r.tensors) {
                if (s.type != t || s.region != g) continue;
                ++c.tensors;
                if (s.cosine) {
                    sum += *s.cosine;
                    ++defined;
                } else {
                    ++c.undefined;
                }
            }
            if (defined) c.mean = sum / static_cast<double>(defined);
            r.cells.push_back(c);
        }
    }
    return r;
}

std::string SweepResult::to_csv() const {
    std::set<std::string> names;
    for (const auto& c : cells)
        for (const auto& [k, v] : c.metrics) names.insert(k);
    std::ostringstream os;
    os.precision(10);
    os << "alpha,beta";
    for (const auto& n : names) os << ',' << n;
    os << ",error\n";
    for (const auto& c : cells) {
        os << c.alpha << ',' << c.beta;
        for (const auto& n : names) {
            os << ',';
            if (auto it = c.metrics.find(n); it != c.metrics.end()) os << it->second;
        }
        os << ',';
        if (c.error) {
            std::string e = *c.error;
            for (char& ch : e)
                if (ch == ',' || ch == '\n') ch = ' ';
            os << e;
        }
        os << '\n';
    }
    return os.str();
}

std::vector<double> default_sweep_grid() { return {0.8, 0.9, 1.0, 1.1, 1.2}; }

SweepResult sensitivity_sweep(const Checkpoint& base, const Checkpoint& tau_ip, const Checkpoint& tau_p,
                              const std::vector<double>& alphas, const std::vector<double>& betas,
                              const Evaluator& evaluator) {
    if (alphas.empty() || betas.empty()) throw std::invalid_argument("sweep grids must be non-empty");
    SweepResult r;
    for (double a : alphas) {
        for (double b : betas) {
            SweepCell c{a, b, {}, std::nullopt};
            try {
                c.metrics = evaluator(merge(base, tau_ip, tau_p, {a, b}).merged);
            } catch (const std::exception& e) {
                c.error = e.what();
            }
            r.cells.push_back(std::move(c));
        }
    }
    return r;
}

double frobenius_norm(const Checkpoint& ckpt) {
    double acc = 0;
    for (const auto& [name, t] : ckpt)
        for (float v : t.data()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

}  // namespace vinpaint::merge
