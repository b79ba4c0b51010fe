#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "oracle.hpp"
#include "vinpaint/motion.hpp"
#include "vinpaint/rng.hpp"
#include "vinpaint/tensor.hpp"

namespace testing {

template <typename T>
vinpaint::Tensor<T> randn(vinpaint::Shape shape, vinpaint::Rng& rng, double scale = 1.0) {
    vinpaint::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
    return t;
}

template <typename T>
oracle::Vec to_vec(const vinpaint::Tensor<T>& t) {
    return oracle::Vec(t.data().begin(), t.data().end());
}

template <typename T>
oracle::Video to_video(const vinpaint::Tensor<T>& t) {
    const auto& s = t.shape();
    oracle::Video v(s[0], s[1], s[2], s[3], s[4]);
    v.v = to_vec(t);
    return v;
}

template <typename T>
oracle::Weights to_weights(const vinpaint::motion::AttentionParams<T>& p) {
    return {to_vec(p.wq), to_vec(p.wk), to_vec(p.wv), to_vec(p.wo), p.d_kv(), p.d_model(), p.heads};
}

template <typename T>
oracle::Block to_block(const vinpaint::motion::MotionBlockParams<T>& p) {
    oracle::Block b{to_weights(p.temporal1), to_weights(p.temporal2), to_weights(p.dga), to_weights(p.cross),
                    p.target.w, p.target.h, {}, {}};
    for (int i = 0; i < 4; ++i) {
        b.scale[i] = to_vec(p.norms[i].scale);
        b.shift[i] = to_vec(p.norms[i].shift);
    }
    return b;
}

/// Relative error ‖a − ref‖∞ / ‖ref‖∞ between a tensor and an oracle vector.
template <typename T>
double rel_err(const vinpaint::Tensor<T>& a, const oracle::Vec& ref) {
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(a[i]) - ref[i]));
        scale = std::max(scale, std::abs(ref[i]));
    }
    return scale == 0 ? diff : diff / scale;
}

/// Motion block with every weight random (nonzero output projections) and
/// perturbed norm affines, so every parameter influences the output.
template <typename T>
vinpaint::motion::MotionBlockParams<T> random_block(std::uint64_t seed, std::size_t d, std::size_t d_text,
                                                    std::size_t heads, vinpaint::motion::GridSize target) {
    vinpaint::motion::InitOptions o;
    o.heads = heads;
    o.target = target;
    o.zero_new_output_projections = false;
    auto p = vinpaint::motion::init_motion_block<T>(seed, d, d_text, o);
    vinpaint::Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto& n : p.norms) {
        for (auto& v : n.scale.data()) v = static_cast<T>(1.0 + 0.2 * rng.normal());
        for (auto& v : n.shift.data()) v = static_cast<T>(0.2 * rng.normal());
    }
    return p;
}

class TempDir {
public:
    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "vinpaint_test_XXXXXX").string();
        path_ = mkdtemp(tmpl.data());
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace testing
