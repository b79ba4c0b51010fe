// Prints one PASS/FAIL line per acceptance criterion. Exit status is the
// number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "support.hpp"
#include "vinpaint/checkpoint.hpp"
#include "vinpaint/diffusion.hpp"
#include "vinpaint/error.hpp"
#include "vinpaint/finite_diff.hpp"
#include "vinpaint/merge.hpp"
#include "vinpaint/metrics.hpp"
#include "vinpaint/motion.hpp"
#include "vinpaint/region.hpp"

using namespace vinpaint;
using testing::randn;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

template <typename T>
motion::AttentionParams<T> random_attention(std::size_t d, std::size_t d_kv, std::size_t heads, Rng& rng) {
    return {randn<T>({d, d}, rng, 0.5), randn<T>({d_kv, d}, rng, 0.5), randn<T>({d_kv, d}, rng, 0.5),
            randn<T>({d, d}, rng, 0.5), heads};
}

Outcome attention_oracles() {
    const auto t0 = Clock::now();
    Rng rng(101);
    const std::size_t shapes = 120;
    double worst[3] = {0, 0, 0};
    for (std::size_t trial = 0; trial < shapes; ++trial) {
        const std::size_t heads = 1 + rng.index(4);
        const std::size_t c = heads * (1 + rng.index(16 / heads));
        const std::size_t b = 1 + rng.index(2), f = 1 + rng.index(4), w = 1 + rng.index(4), h = 1 + rng.index(4);
        const std::size_t d_text = 1 + rng.index(16), l_text = 1 + rng.index(6);
        const motion::GridSize target{1 + rng.index(w), 1 + rng.index(h)};
        const auto x = randn<float>({b, f, c, w, h}, rng);
        const auto xv = testing::to_video(x);

        const auto pt = random_attention<float>(c, c, heads, rng);
        const auto rt = oracle::temporal(xv, testing::to_weights(pt));
        worst[0] = std::max(worst[0], testing::rel_err(motion::temporal_attention(x, pt), rt.v));

        const auto pd = random_attention<float>(c, c, heads, rng);
        const auto rd = oracle::damped_global(xv, testing::to_weights(pd), target.w, target.h);
        worst[1] = std::max(worst[1], testing::rel_err(motion::damped_global_attention(x, pd, target), rd.v));

        const auto pc = random_attention<float>(c, d_text, heads, rng);
        const motion::TextEmbedding<float> text{randn<float>({l_text, d_text}, rng)};
        const auto rc = oracle::cross(xv, testing::to_vec(text.tokens), l_text, testing::to_weights(pc), target.w,
                                      target.h);
        worst[2] = std::max(worst[2], testing::rel_err(motion::textual_cross_attention(x, text, pc, target), rc.v));
    }
    const double secs = seconds_since(t0);
    const bool ok = worst[0] < 1e-5 && worst[1] < 1e-5 && worst[2] < 1e-5 && secs < 30;
    return {ok, std::to_string(shapes) + " shapes, max rel err temporal " + fmt("%.2e", worst[0]) + " dga " +
                    fmt("%.2e", worst[1]) + " cross " + fmt("%.2e", worst[2]) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    Rng rng(202);
    const auto params = testing::random_block<double>(203, 4, 3, 2, motion::GridSize{2, 2});
    const auto x = randn<double>({1, 2, 4, 4, 4}, rng);
    const auto text = randn<double>({2, 3}, rng);
    const auto weights = randn<double>(x.shape(), rng);
    auto loss_of = [&](const motion::MotionBlockParams<double>& p) {
        const auto y = motion::motion_block_forward(x, motion::TextEmbedding<double>{text}, p);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * weights[i];
        return acc;
    };
    Tape<double> tape;
    const auto bound = motion::bind(tape, params);
    auto y = motion::motion_block_forward(tape.leaf(x), tape.leaf(text), bound);
    const auto grads = backward(ag::sum(ag::mul(y, tape.leaf(weights))));
    const auto entries = params.entries();
    if (entries.size() != bound.leaf_ids.size()) return {false, "parameter list and tape leaves differ"};
    double worst = 0;
    std::string worst_name;
    std::size_t scalars = 0;
    for (std::size_t e = 0; e < entries.size(); ++e) {
        auto fn = [&](const TensorD& probe) {
            auto p = params;
            *p.entries()[e].second = probe;
            return loss_of(p);
        };
        const auto fd = finite_diff_grad(fn, *entries[e].second, 1e-5);
        const double err = relative_error(grads.at(bound.leaf_ids[e].second), fd);
        scalars += fd.size();
        if (err >= worst) {
            worst = err;
            worst_name = entries[e].first;
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60, std::to_string(entries.size()) + " tensors (" + std::to_string(scalars) +
                                           " scalars), worst rel err " + fmt("%.2e", worst) + " at " + worst_name +
                                           ", " + fmt("%.1f", secs) + " s"};
}

Outcome dga_cost() {
    Rng rng(303);
    std::size_t good = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::uint64_t b = 1 + rng.index(2), f = 1 + rng.index(24), c = 8 * (1 + rng.index(40));
        const std::uint64_t w = 1 + rng.index(64), h = 1 + rng.index(64);
        const motion::GridSize target{1 + rng.index(w), 1 + rng.index(h)};
        const auto r = motion::attention_cost_report(b, f, c, w, h, target, 77);
        const std::uint64_t full = (w * h) * (w * h), reduced = (target.w * target.h) * (target.w * target.h);
        const std::uint64_t L = f * target.w * target.h;
        // Integer cross-multiplication, then the correctly rounded quotient.
        const bool exact = r.naive_global.elements * reduced == r.damped_global.elements * full &&
                           r.dga_reduction() == static_cast<double>(full) / static_cast<double>(reduced);
        const bool length = r.damped_global.sequence_length == L && r.damped_global.key_length == L &&
                            r.damped_global.elements == b * L * L && r.naive_global.sequence_length == f * w * h;
        good += exact && length;
    }
    return {good == 10, std::to_string(good) + "/10 configurations exact"};
}

Outcome forward_variance() {
    const auto sched = diffusion::build_schedule(1000);
    Rng rng(404);
    const std::size_t n = 100000;
    const auto z0 = randn<double>({n / 4, 4, 1, 1}, rng);
    const auto eps = randn<double>({n / 4, 4, 1, 1}, rng);
    double worst = 0;
    for (std::size_t t : {0, 100, 400, 700, 999}) {
        const auto zt = diffusion::forward_noise(diffusion::LatentClip<double>(z0), t, eps, sched).z;
        double mean = 0, var = 0;
        for (double v : zt.data()) mean += v;
        mean /= static_cast<double>(n);
        for (double v : zt.data()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n - 1);
        const double expect = sched.alpha_bars[t] + (1 - sched.alpha_bars[t]);
        worst = std::max(worst, std::abs(var / expect - 1.0));
    }
    return {worst < 0.05, "1e5 samples at 5 timesteps, worst relative variance deviation " + fmt("%.4f", worst)};
}

Outcome ddim_recovery() {
    const auto sched = diffusion::build_schedule(1000);
    Rng rng(505);
    const auto z0 = randn<float>({3, 4, 8, 6}, rng);
    TensorF m({3, 1, 64, 48});
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t x = 16; x < 40; ++x)
            for (std::size_t y = 8 + 4 * f; y < 32 + 4 * f; ++y) m[(f * 64 + x) * 48 + y] = 1.0f;
    diffusion::InpaintRequest<float> req;
    req.mask = diffusion::MaskSequence(m);
    req.known = diffusion::LatentClip<float>(z0);
    req.z_masked = diffusion::LatentClip<float>(z0);
    req.text = diffusion::ToyTextEncoder(8, 1).encode<float>("a dog");
    req.null_text = diffusion::null_text_embedding<float>(8);
    const diffusion::Denoiser<float> truth = [&](const diffusion::DenoiserInput<float>& in) {
        const auto zt = slice(in.channels, 1, 0, 4);
        const double a = sched.alpha_bars[in.t];
        TensorF e(zt.shape());
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = static_cast<float>((zt[i] - std::sqrt(a) * z0[i]) / std::sqrt(1.0 - a));
        return e;
    };
    const TensorF latent_mask = req.mask.resized<float>(8, 6);
    float worst = 0;
    std::size_t background = 0, mismatched = 0;
    for (std::size_t steps : {1, 10, 50}) {
        diffusion::SamplerOptions o;
        o.steps = steps;
        o.seed = 17 + steps;
        const auto res = diffusion::ddim_sample(truth, req, sched, o);
        worst = std::max(worst, max_abs_diff(res.latents.z, z0));
        for (std::size_t f = 0; f < 3; ++f)
            for (std::size_t c = 0; c < 4; ++c)
                for (std::size_t p = 0; p < 48; ++p) {
                    if (latent_mask[f * 48 + p] != 0.0f) continue;
                    ++background;
                    const std::size_t i = (f * 4 + c) * 48 + p;
                    mismatched += std::memcmp(&res.latents.z[i], &z0[i], sizeof(float)) != 0;
                }
    }
    return {worst < 1e-4f && background > 0 && mismatched == 0,
            "steps 1/10/50 max abs err " + fmt("%.2e", worst) + ", " + std::to_string(background) +
                " background latents, " + std::to_string(mismatched) + " differ"};
}

Outcome toy_overfit() {
    diffusion::TrainConfig cfg;
    cfg.steps = 500;
    cfg.lr = 1e-4;
    cfg.model.d_model = 32;
    cfg.fixed_noise = true;
    const diffusion::ToyCodec codec;
    const diffusion::ToyTextEncoder text(cfg.model.d_text);
    const std::vector<diffusion::TrainingExample<float>> data{diffusion::make_synthetic_example<float>(
        cfg.frames, cfg.latent_w, cfg.latent_h, codec, text, cfg.prompt, cfg.seed)};
    const auto sched = diffusion::build_schedule(cfg.model.timesteps);
    const auto init = diffusion::init_toy_denoiser<float>(cfg.seed, cfg.model);
    const auto t0 = Clock::now();
    const auto a = diffusion::train_toy(init, data, sched, cfg);
    const double secs = seconds_since(t0);
    const auto b = diffusion::train_toy(init, data, sched, cfg);
    const double ratio = a.losses.back() / a.losses.front();
    const bool same = a.losses == b.losses;
    return {ratio < 0.1 && same && secs < 300,
            "500 steps, final/initial loss " + fmt("%.4f", ratio) + (same ? ", repeat identical" : ", repeat differs") +
                ", " + fmt("%.1f", secs) + " s"};
}

ckpt::Checkpoint unet_like(std::uint64_t seed) {
    Rng rng(seed);
    ckpt::Checkpoint c;
    const char* regions[] = {"down_blocks.1", "mid_block", "up_blocks.2"};
    const char* layers[] = {"resnets.0.conv1.weight", "attentions.0.to_q.weight", "attentions.0.to_k.weight",
                            "attentions.0.to_v.weight", "attentions.0.to_out.0.weight", "attentions.0.ff.net.0.weight"};
    for (const char* r : regions)
        for (const char* l : layers) c[std::string(r) + "." + l] = randn<float>({6, 5}, rng);
    c["conv_in.weight"] = randn<float>({3, 4, 3, 3}, rng);
    return c;
}

double max_diff(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b) {
    if (a.size() != b.size()) return INFINITY;
    double d = 0;
    for (const auto& [k, t] : a) {
        auto it = b.find(k);
        if (it == b.end() || it->second.shape() != t.shape()) return INFINITY;
        d = std::max(d, static_cast<double>(max_abs_diff(t, it->second)));
    }
    return d;
}

// Valid 3x3 convolution of [c_in, w, h] by [c_out, c_in, 3, 3] in f64.
std::vector<double> conv3x3(const TensorF& k, const TensorD& x) {
    const std::size_t co = k.dim(0), ci = k.dim(1), w = x.dim(1), h = x.dim(2);
    std::vector<double> out(co * (w - 2) * (h - 2));
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i + 2 < w; ++i)
            for (std::size_t j = 0; j + 2 < h; ++j) {
                double acc = 0;
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t a = 0; a < 3; ++a)
                        for (std::size_t b = 0; b < 3; ++b) acc += k.at({o, c, a, b}) * x.at({c, i + a, j + b});
                out[(o * (w - 2) + i) * (h - 2) + j] = acc;
            }
    return out;
}

Outcome merge_identities() {
    const auto base = merge::pad_input_channels(unet_like(1), "conv_in.weight");
    const auto ip = unet_like(2);
    const auto padded_ip = merge::pad_input_channels(ip, "conv_in.weight");
    const auto p = merge::pad_input_channels(unet_like(3), "conv_in.weight");
    const auto tip = merge::task_vector(padded_ip, base).delta, tp = merge::task_vector(p, base).delta;
    const double e_ip = max_diff(merge::merge(base, tip, tp, {1, 0}).merged, padded_ip);
    const double e_p = max_diff(merge::merge(base, tip, tp, {0, 1}).merged, p);

    Rng rng(707);
    bool exact = true;
    const auto ref_kernel = ip.at("conv_in.weight");
    const auto& padded = padded_ip.at("conv_in.weight");
    for (int trial = 0; trial < 5; ++trial) {
        const auto x4 = randn<double>({4, 7, 6}, rng);
        const auto extra = randn<double>({5, 7, 6}, rng, 10.0);
        const auto x9 = concat<double>({&x4, &extra}, 0);
        exact = exact && conv3x3(padded, x9) == conv3x3(ref_kernel, x4);
    }
    return {e_ip < 1e-6 && e_p < 1e-6 && exact,
            "ip max err " + fmt("%.2e", e_ip) + ", p max err " + fmt("%.2e", e_p) +
                (exact ? ", padded conv identical" : ", padded conv differs")};
}

Outcome similarity_analysis() {
    const auto a = unet_like(11);
    auto neg = a, orth = a;
    Rng rng(808);
    for (auto& [k, t] : neg) t = -1.0f * t;
    for (auto& [k, t] : orth) {
        const auto& ref = a.at(k);
        auto r = randn<float>(t.shape(), rng);
        double rr = 0, aa = 0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            rr += static_cast<double>(ref[i]) * r[i];
            aa += static_cast<double>(ref[i]) * ref[i];
        }
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<float>(r[i] - rr / aa * ref[i]);
        t = r;
    }
    const auto same = merge::layer_similarity_report(a, a);
    const auto opposite = merge::layer_similarity_report(a, neg);
    const auto ortho = merge::layer_similarity_report(a, orth);
    double e_same = 0, e_neg = 0, e_orth = 0;
    for (const auto* r : {&same, &opposite, &ortho}) {
        for (const auto& t : r->tensors) {
            if (!t.cosine) return {false, "undefined cosine for " + t.name};
        }
    }
    for (const auto& t : same.tensors) e_same = std::max(e_same, std::abs(*t.cosine - 1.0));
    for (const auto& t : opposite.tensors) e_neg = std::max(e_neg, std::abs(*t.cosine + 1.0));
    for (const auto& t : ortho.tensors) e_orth = std::max(e_orth, std::abs(*t.cosine));
    const bool grid = same.cells.size() == 18 && same.populated_cells() == 18;
    return {e_same < 1e-12 && e_neg < 1e-12 && e_orth <= 1e-7 && grid,
            "identical dev " + fmt("%.1e", e_same) + ", negated dev " + fmt("%.1e", e_neg) + ", orthogonal |cos| " +
                fmt("%.1e", e_orth) + ", " + std::to_string(same.populated_cells()) + "/18 cells populated"};
}

Outcome sampling_distribution() {
    region::DetectionAnnotation ann;
    ann.prompt = "a brown dog chases a red ball";
    ann.phrases = {{"brown dog", 1, 3}, {"red ball", 5, 7}};
    const region::Box dog{0.1, 0.2, 0.4, 0.6}, ball{0.6, 0.6, 0.7, 0.7};
    ann.frames = {{{0, dog, 0.8}, {1, ball, 0.5}},
                  {{0, {0.15, 0.2, 0.45, 0.6}, 0.7}, {1, {0.62, 0.58, 0.71, 0.69}, 0.6}},
                  {{0, {0.2, 0.25, 0.5, 0.65}, 0.9}}};
    region::SampleOptions o;
    o.width = 16;
    o.height = 12;
    o.probs = {0.7, 0.2, 0.1};
    Rng rng(909);
    const std::size_t n = 100000;
    std::size_t counts[3] = {0, 0, 0}, precise_ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = region::sample_training_clip(ann, rng, o);
        ++counts[static_cast<int>(s.kind)];
        if (s.kind != region::ClipKind::precise) continue;
        bool ok = !s.boxes.empty();
        for (std::size_t f = 0; f < s.boxes.size(); ++f) ok = ok && region::covers(s.masks, f, s.boxes[f]);
        precise_ok += ok;
    }
    double worst = 0;
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(static_cast<double>(counts[k]) / n - o.probs[k]));
    std::ostringstream os;
    os << "frequencies " << static_cast<double>(counts[0]) / n << "/" << static_cast<double>(counts[1]) / n << "/"
       << static_cast<double>(counts[2]) / n << ", precise coverage " << precise_ok << "/" << counts[0];
    return {worst <= 0.01 && precise_ok == counts[0] && counts[0] > 0, os.str()};
}

Outcome metric_cases() {
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const std::string& name) {
        if (!ok) failed.push_back(name);
    };
    Rng rng(1001);
    TensorD video({3, 3, 8, 6});
    for (auto& v : video.data()) v = rng.uniform();
    TensorF m({3, 1, 8, 6});
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t y = 0; y < 6; ++y) m[(f * 8 + x) * 6 + y] = 1.0f;
    const diffusion::MaskSequence mask(m);
    expect(metrics::background_preservation(video, video, mask) == 0.0, "bp identical");
    auto offset = video;
    for (std::size_t i = 0; i < offset.size(); ++i) offset[i] += 2.0 / 255.0;
    const auto bp = metrics::background_preservation(video, offset, mask);
    expect(bp && std::abs(*bp - 2.0) < 1e-9, "bp offset");
    auto inside = video;
    inside.at({1, 2, 0, 0}) += 0.9;
    expect(metrics::background_preservation(video, inside, mask) == 0.0, "bp masked change");

    const metrics::Feature a{0.3, -1.2, 2.0};
    const auto tc = metrics::temporal_consistency({a, a, a});
    expect(tc && std::abs(*tc - 100.0) < 1e-9, "tc identical");
    const metrics::Feature e1{1, 0}, e2{0, 1};
    const auto tc0 = metrics::temporal_consistency({e1, e2, e1});
    expect(tc0 && std::abs(*tc0) < 1e-9, "tc orthogonal");
    const auto cs = metrics::clip_style_score({a, a}, a);
    expect(cs && std::abs(*cs - 100.0) < 1e-9, "cs identical");
    const auto cs0 = metrics::clip_style_score({e1}, e2);
    expect(cs0 && std::abs(*cs0) < 1e-9, "cs orthogonal");
    expect(metrics::clip_style_score({metrics::Feature{-1, 0}}, e1) == 0.0, "cs clamp");

    // Consecutive cosines cos(θ_i) for rotations by known angles.
    const double angles[] = {0.3, 1.1, 0.05, 2.0};
    std::vector<metrics::Feature> seq{{1.0, 0.0}};
    double theta = 0, sum = 0;
    for (double d : angles) {
        theta += d;
        const double s = 0.5 + theta;
        seq.push_back({s * std::cos(theta), s * std::sin(theta)});
        sum += std::cos(d);
    }
    const auto known = metrics::temporal_consistency(seq);
    const double ref = 100.0 * sum / 4.0;
    expect(known && std::abs(*known - ref) < 1e-9, "tc known cosines");

    std::string detail = "11 cases";
    if (!failed.empty()) {
        detail = "failed:";
        for (const auto& f : failed) detail += " " + f;
    }
    if (known) detail += ", known-cosine TC error " + fmt("%.1e", std::abs(*known - ref));
    return {failed.empty(), detail};
}

Outcome codec() {
    Rng rng(1101);
    ckpt::Checkpoint c;
    c["conv_in.weight"] = randn<float>({3, 4, 3, 3}, rng);
    c["bias"] = randn<float>({7}, rng);
    c["bias"][0] = -0.0f;
    c["bias"][1] = std::numeric_limits<float>::denorm_min();
    const auto bytes = ckpt::encode_checkpoint(c);
    const auto back = ckpt::decode_checkpoint(bytes);
    bool exact = back.size() == c.size();
    for (const auto& [k, t] : c) {
        exact = exact && back.count(k) && back.at(k).shape() == t.shape() &&
                std::memcmp(back.at(k).data().data(), t.data().data(), t.size() * sizeof(float)) == 0;
    }
    exact = exact && ckpt::encode_checkpoint(back) == bytes;

    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[5 + i])) << (8 * i);
    std::vector<std::string> fixtures{"CKPT0" + bytes.substr(5), bytes.substr(0, 3), bytes.substr(0, 10),
                                      bytes.substr(0, bytes.size() - 2), bytes + "extra"};
    for (std::size_t i = 13; i < 13 + len; ++i) {
        auto corrupt = bytes;
        corrupt[i] = static_cast<char>(corrupt[i] ^ 0xff);
        fixtures.push_back(corrupt);
    }
    std::size_t rejected = 0;
    for (const auto& f : fixtures) {
        try {
            ckpt::decode_checkpoint(f);
        } catch (const FormatError& e) {
            rejected += !e.field().empty();
        } catch (...) {
        }
    }
    return {exact && rejected == fixtures.size(),
            std::string(exact ? "round trip bit-exact" : "round trip differs") + ", " + std::to_string(rejected) + "/" +
                std::to_string(fixtures.size()) + " corrupt fixtures rejected with a named field"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"attention oracles", attention_oracles},
        {"motion block gradients", gradient_suite},
        {"damped global attention cost", dga_cost},
        {"forward noising variance", forward_variance},
        {"DDIM oracle recovery", ddim_recovery},
        {"toy overfit", toy_overfit},
        {"merge identities and padding", merge_identities},
        {"layer similarity analysis", similarity_analysis},
        {"mask sampling distribution", sampling_distribution},
        {"metric unit cases", metric_cases},
        {"checkpoint codec", codec},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return failures;
}
