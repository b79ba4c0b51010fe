#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vinpaint/error.hpp"
#include "vinpaint/merge.hpp"

using namespace vinpaint;
using namespace vinpaint::merge;
using testing::randn;

namespace {

Checkpoint unet_like(std::uint64_t seed) {
    Rng rng(seed);
    Checkpoint c;
    const char* regions[] = {"down_blocks.0", "mid_block", "up_blocks.1"};
    const char* layers[] = {"resnets.0.conv1.weight", "attn.to_q.weight", "attn.to_k.weight",
                            "attn.to_v.weight",        "attn.to_out.0.weight", "attn.ff.net.weight"};
    for (const char* r : regions)
        for (const char* l : layers) c[std::string(r) + "." + l] = randn<float>({4, 3}, rng);
    c["conv_in.weight"] = randn<float>({2, 4, 3, 3}, rng);
    return c;
}

// Valid 3x3 convolution of [c_in, w, h] by [c_out, c_in, 3, 3], in f64.
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

double max_diff(const Checkpoint& a, const Checkpoint& b) {
    REQUIRE(a.size() == b.size());
    double d = 0;
    for (const auto& [k, t] : a) d = std::max(d, static_cast<double>(max_abs_diff(t, b.at(k))));
    return d;
}

}  // namespace

TEST_SUITE("merge") {

TEST_CASE("input-channel padding") {
    const auto c = unet_like(1);
    const auto p = pad_input_channels(c, "conv_in.weight");
    const auto& w = p.at("conv_in.weight");
    CHECK(w.shape() == Shape{2, 9, 3, 3});
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t ch = 0; ch < 9; ++ch)
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 3; ++b) {
                    const float expect = ch < 4 ? c.at("conv_in.weight").at({o, ch, a, b}) : 0.0f;
                    CHECK(w.at({o, ch, a, b}) == expect);
                }
    for (const auto& [k, t] : c)
        if (k != "conv_in.weight") CHECK(p.at(k) == t);
    CHECK(frobenius_norm(p) == frobenius_norm(c));
    CHECK_THROWS_AS(pad_input_channels(p, "conv_in.weight"), ShapeError);
    CHECK_THROWS_AS(pad_input_channels(c, "missing"), MergeError);
}

TEST_CASE("padded kernels ignore the extra input channels") {
    Rng rng(2);
    const auto c = unet_like(2);
    const auto padded = pad_input_channels(c, "conv_in.weight").at("conv_in.weight");
    const auto x4 = randn<double>({4, 6, 5}, rng);
    const auto ref = conv3x3(c.at("conv_in.weight"), x4);
    for (int trial = 0; trial < 3; ++trial) {
        const auto extra = randn<double>({5, 6, 5}, rng, 10.0);
        const auto x9 = concat<double>({&x4, &extra}, 0);
        const auto got = conv3x3(padded, x9);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == ref[i]);
    }
}

TEST_CASE("task vectors") {
    const auto a = unet_like(3), b = unet_like(4);
    const auto zero = task_vector(a, a);
    for (const auto& [k, t] : zero.delta)
        for (float v : t.data()) CHECK(v == 0.0f);
    const auto tv = task_vector(a, b);
    CHECK(tv.unmatched.empty());
    for (const auto& [k, t] : tv.delta)
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(static_cast<double>(t[i]) ==
                  doctest::Approx(static_cast<double>(a.at(k)[i]) - static_cast<double>(b.at(k)[i])).epsilon(1e-7));
    // Adding the delta back reconstructs the source.
    const auto rebuilt = merge::merge(b, tv.delta, task_vector(b, b).delta, {1.0, 0.0}).merged;
    CHECK(max_diff(rebuilt, a) < 1e-6);

    auto extra = a;
    extra["only.here"] = TensorF({1});
    const auto partial = task_vector(extra, b);
    CHECK(partial.unmatched.only_in_first == std::vector<std::string>{"only.here"});
    CHECK_FALSE(partial.delta.count("only.here"));
    CHECK(partial.unmatched.to_text() == "only_in_first only.here\n");
    auto bad = b;
    bad["mid_block.attn.to_q.weight"] = TensorF({3, 4});
    try {
        task_vector(a, bad);
        FAIL("expected MergeError");
    } catch (const MergeError& e) {
        CHECK(e.key() == "mid_block.attn.to_q.weight");
    }
}

TEST_CASE("merge recipes") {
    const auto base = pad_input_channels(unet_like(5), "conv_in.weight");
    const auto ip = pad_input_channels(unet_like(6), "conv_in.weight");
    const auto p = pad_input_channels(unet_like(7), "conv_in.weight");
    const auto tip = task_vector(ip, base).delta, tp = task_vector(p, base).delta;
    CHECK(max_diff(merge::merge(base, tip, tp, {1, 0}).merged, ip) < 1e-6);
    CHECK(max_diff(merge::merge(base, tip, tp, {0, 1}).merged, p) < 1e-6);

    Checkpoint b0{{"w", TensorF({1}, 0.0f)}}, b1{{"w", TensorF({1}, 2.0f)}}, b2{{"w", TensorF({1}, 4.0f)}};
    const auto seven = merge::merge(b0, b1, b2, {0.5, 1.5});
    CHECK(seven.merged.at("w")[0] == 7.0f);
    CHECK(seven.warnings.empty());

    for (double alpha : {0.3, 1.0, 1.7}) {
        const auto one = merge::merge(base, tip, tp, {alpha, 1.2}).merged;
        const auto two = merge::merge(base, tip, tp, {2 * alpha, 1.2}).merged;
        for (const auto& [k, t] : one)
            for (std::size_t i = 0; i < t.size(); ++i)
                CHECK(std::abs((two.at(k)[i] - t[i]) - alpha * tip.at(k)[i]) < 1e-6);
    }
    CHECK(merge::merge(base, tip, tp, {2.0, 0.5}).warnings.size() == 2);
    CHECK(MergeRecipe{1.5, 2.0}.warnings().empty());
    CHECK_THROWS_AS(merge::merge(base, tip, tp, {NAN, 1}), std::invalid_argument);

    auto tp_missing = tp;
    tp_missing.erase("mid_block.attn.to_v.weight");
    const auto partial = merge::merge(base, tip, tp_missing, {1, 1});
    CHECK(partial.unmatched == std::vector<std::string>{"mid_block.attn.to_v.weight"});
    CHECK_FALSE(partial.merged.count("mid_block.attn.to_v.weight"));
    auto tp_bad = tp;
    tp_bad.at("conv_in.weight") = TensorF({2, 4, 3, 3});
    CHECK_THROWS_AS(merge::merge(base, tip, tp_bad, {1, 1}), MergeError);
}

TEST_CASE("cosine similarity") {
    Rng rng(8);
    const auto a = randn<float>({3, 7}, rng);
    CHECK(*cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*cosine_similarity(a, -1.0f * a) == doctest::Approx(-1.0).epsilon(1e-12));
    // Gram-Schmidt an independent draw against a.
    auto b = randn<float>({3, 7}, rng);
    double ab = 0, aa = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
    }
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<float>(b[i] - ab / aa * a[i]);
    CHECK(std::abs(*cosine_similarity(a, b)) < 1e-7);
    for (float s : {0.01f, 3.0f, 1000.0f}) CHECK(std::abs(*cosine_similarity(a, s * b) - *cosine_similarity(a, b)) < 1e-7);
    const auto c = randn<float>({21}, rng);
    CHECK(std::abs(*cosine_similarity(a, 7.0f * c) - *cosine_similarity(a, c)) < 1e-7);
    CHECK_FALSE(cosine_similarity(a, TensorF({21})).has_value());
    CHECK_THROWS_AS(cosine_similarity(a, TensorF({4})), ShapeError);
}

TEST_CASE("layer classification") {
    const auto cls = LayerClassifier::defaults();
    CHECK(cls.type_of("down_blocks.0.attentions.0.to_q.weight") == LayerType::query);
    CHECK(cls.type_of("up_blocks.1.attn.to_out.0.weight") == LayerType::out_proj);
    CHECK(cls.type_of("mid_block.resnets.0.conv1.weight") == LayerType::conv);
    CHECK(cls.type_of("x.ff.net.0.proj.weight") == LayerType::ffn);
    CHECK_FALSE(cls.type_of("time_embedding.linear_1.weight").has_value());
    CHECK(cls.region_of("mid_block.attn.to_k.weight") == Region::middle);
    CHECK(cls.region_of("up_blocks.3.x") == Region::up);
    CHECK_FALSE(cls.region_of("conv_in.weight").has_value());
    CHECK(std::string(to_string(LayerType::out_proj)) == "out");
}

TEST_CASE("similarity report") {
    const auto a = unet_like(9);
    const auto self = layer_similarity_report(a, a);
    CHECK(self.cells.size() == 18);
    CHECK(self.populated_cells() == 18);
    for (const auto& t : self.tensors) CHECK(*t.cosine == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& c : self.cells) CHECK(*c.mean == doctest::Approx(1.0).epsilon(1e-12));
    auto neg = a;
    for (auto& [k, t] : neg) t = -1.0f * t;
    for (const auto& c : layer_similarity_report(a, neg).cells) CHECK(*c.mean == doctest::Approx(-1.0).epsilon(1e-12));

    auto zeroed = a;
    zeroed.at("mid_block.attn.to_k.weight") = TensorF({4, 3});
    zeroed.erase("up_blocks.1.attn.to_v.weight");
    zeroed["extra"] = TensorF({1}, 1.0f);
    const auto r = layer_similarity_report(a, zeroed);
    const auto& undefined = r.cell(LayerType::key, Region::middle);
    CHECK(undefined.tensors == 1);
    CHECK(undefined.undefined == 1);
    CHECK_FALSE(undefined.mean.has_value());
    CHECK(r.cell(LayerType::value, Region::up).tensors == 0);
    CHECK(r.populated_cells() == 17);
    CHECK(r.unmatched.only_in_first == std::vector<std::string>{"up_blocks.1.attn.to_v.weight"});
    CHECK(r.unmatched.only_in_second == std::vector<std::string>{"extra"});
    const auto csv = r.to_csv();
    CHECK(csv.rfind("type,region,tensors,undefined,mean\n", 0) == 0);
    CHECK(csv.find("key,middle,1,1,undefined\n") != std::string::npos);
    CHECK_THROWS_AS(layer_similarity_report(a, Checkpoint{{"zzz", TensorF({1})}}), MergeError);
}

TEST_CASE("sweep values follow the closed form on rank-1 checkpoints") {
    Rng rng(10);
    const auto u = randn<float>({6}, rng);
    double un = 0;
    for (float v : u.data()) un += static_cast<double>(v) * v;
    un = std::sqrt(un);
    const Checkpoint base{{"w", 0.5f * u}}, tip{{"w", 2.0f * u}}, tp{{"w", 0.25f * u}};
    const auto r = sensitivity_sweep(base, tip, tp, default_sweep_grid(), default_sweep_grid(),
                                     [](const Checkpoint& c) { return std::map<std::string, double>{{"fro", frobenius_norm(c)}}; });
    REQUIRE(r.cells.size() == 25);
    CHECK(r.cells[0].alpha == 0.8);
    CHECK(r.cells[1].beta == 0.9);
    CHECK(r.cells[5].alpha == 0.9);
    for (const auto& c : r.cells) {
        const double expect = (0.5 + 2.0 * c.alpha + 0.25 * c.beta) * un;
        CHECK(c.metrics.at("fro") == doctest::Approx(expect).epsilon(1e-6));
    }
    const auto single = sensitivity_sweep(base, tip, tp, {1.1}, {1.3}, [](const Checkpoint& c) {
        return std::map<std::string, double>{{"fro", frobenius_norm(c)}};
    });
    CHECK(single.cells[0].metrics.at("fro") == frobenius_norm(merge::merge(base, tip, tp, {1.1, 1.3}).merged));
    CHECK(r.to_csv().rfind("alpha,beta,fro,error\n0.8,0.8,", 0) == 0);
}

TEST_CASE("evaluator failures are recorded per cell") {
    const Checkpoint one{{"w", TensorF({1}, 1.0f)}};
    const auto r = sensitivity_sweep(one, one, one, {1.0, 2.0}, {1.0}, [](const Checkpoint& c) {
        if (c.at("w")[0] > 3.5f) throw std::runtime_error("diverged, badly");
        return std::map<std::string, double>{{"w", c.at("w")[0]}};
    });
    REQUIRE(r.cells.size() == 2);
    CHECK_FALSE(r.cells[0].error);
    CHECK(*r.cells[1].error == "diverged, badly");
    CHECK(r.to_csv() == "alpha,beta,w,error\n1,1,3,\n2,1,,diverged  badly\n");
    CHECK_THROWS_AS(sensitivity_sweep(one, one, one, {}, {1.0}, nullptr), std::invalid_argument);
}

}  // TEST_SUITE
