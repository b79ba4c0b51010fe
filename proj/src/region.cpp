#include "vinpaint/region.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vinpaint/error.hpp"
#include "vinpaint/io.hpp"

namespace vinpaint::region {

namespace {

using json = nlohmann::json;

constexpr double kPi = 3.14159265358979323846;
constexpr double kSameObjectIou = 0.7;

struct MaskFrame {
    std::size_t w, h;
    float* data;
    void set(std::size_t x, std::size_t y) { data[x * h + y] = 1.0f; }
    void fill(const PixelRect& r) {
        for (std::size_t x = r.x_begin; x < r.x_end; ++x)
            for (std::size_t y = r.y_begin; y < r.y_end; ++y) set(x, y);
    }
};

MaskFrame frame_view(TensorF& m, std::size_t frame) {
    const std::size_t w = m.dim(2), h = m.dim(3);
    return {w, h, m.data().data() + frame * w * h};
}

bool inside_polygon(double px, double py, const std::vector<std::pair<double, double>>& poly) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) in = !in;
    }
    return in;
}

Box parse_box(const json& j) {
    if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x0, y0, x1, y1]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

// Greedy by score: each phrase takes its best box, and a box that overlaps
// one already taken by another phrase is treated as the same object.
std::vector<std::optional<Box>> assign_frame(const std::vector<Detection>& dets, std::size_t phrase_count,
                                             double threshold, const std::vector<bool>* allowed) {
    std::vector<const Detection*> order;
    for (const auto& d : dets) {
        if (d.score >= threshold && (!allowed || (*allowed)[d.phrase])) order.push_back(&d);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });
    std::vector<std::optional<Box>> out(phrase_count);
    std::vector<Box> taken;
    for (const auto* d : order) {
        if (out[d->phrase]) continue;
        const bool duplicate = std::any_of(taken.begin(), taken.end(),
                                           [&](const Box& b) { return iou(b, d->box) > kSameObjectIou; });
        if (duplicate) continue;
        out[d->phrase] = d->box;
        taken.push_back(d->box);
    }
    return out;
}

}  // namespace

bool Box::valid() const {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && 0.0 <= x0 &&
           x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
}

double Box::area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }

double iou(const Box& a, const Box& b) {
    const Box inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
    const double i = inter.area();
    const double u = a.area() + b.area() - i;
    return u > 0 ? i / u : 0.0;
}

std::vector<std::string> DetectionAnnotation::tokens() const {
    std::istringstream is(prompt);
    std::vector<std::string> out;
    for (std::string t; is >> t;) out.push_back(t);
    return out;
}

void DetectionAnnotation::validate() const {
    const std::size_t n_tokens = tokens().size();
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        const auto& p = phrases[i];
        if (p.begin >= p.end || p.end > n_tokens) {
            throw std::invalid_argument("phrase " + std::to_string(i) + " span [" + std::to_string(p.begin) + ", " +
                                        std::to_string(p.end) + ") is outside the " + std::to_string(n_tokens) +
                                        "-token prompt");
        }
        spans.emplace_back(p.begin, p.end);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) throw std::invalid_argument("phrase token spans overlap");
    }
    if (frames.empty()) throw std::invalid_argument("annotation has no frames");
    for (std::size_t f = 0; f < frames.size(); ++f) {
        for (const auto& d : frames[f]) {
            const std::string where = "frame " + std::to_string(f) + ": ";
            if (d.phrase >= phrases.size()) throw std::invalid_argument(where + "detection names an unknown phrase");
            if (!d.box.valid()) throw std::invalid_argument(where + "box outside [0, 1] or empty");
            if (!(d.score >= 0.0 && d.score <= 1.0)) throw std::invalid_argument(where + "score outside [0, 1]");
        }
    }
}

DetectionAnnotation DetectionAnnotation::from_json(const std::string& text) {
    DetectionAnnotation ann;
    try {
        const json j = json::parse(text);
        ann.prompt = j.at("prompt").get<std::string>();
        for (const auto& p : j.at("phrases")) {
            const auto& span = p.at("span");
            if (!span.is_array() || span.size() != 2) throw std::invalid_argument("span must be [begin, end]");
            ann.phrases.push_back({p.at("text").get<std::string>(), span[0].get<std::size_t>(),
                                   span[1].get<std::size_t>()});
        }
        for (const auto& frame : j.at("frames")) {
            std::vector<Detection> dets;
            for (const auto& d : frame) {
                Detection det;
                const auto& ph = d.at("phrase");
                if (ph.is_string()) {
                    const auto name = ph.get<std::string>();
                    auto it = std::find_if(ann.phrases.begin(), ann.phrases.end(),
                                           [&](const Phrase& p) { return p.text == name; });
                    if (it == ann.phrases.end()) throw std::invalid_argument("unknown phrase \"" + name + "\"");
                    det.phrase = static_cast<std::size_t>(it - ann.phrases.begin());
                } else {
                    det.phrase = ph.get<std::size_t>();
                }
                det.box = parse_box(d.at("box"));
                det.score = d.at("score").get<double>();
                dets.push_back(det);
            }
            ann.frames.push_back(std::move(dets));
        }
        if (j.contains("resolution")) {
            const auto& r = j["resolution"];
            ann.detector_resolution = std::array<std::size_t, 2>{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()};
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("annotation: ") + e.what());
    }
    ann.validate();
    return ann;
}

std::string DetectionAnnotation::to_json() const {
    json j;
    j["prompt"] = prompt;
    j["phrases"] = json::array();
    for (const auto& p : phrases) j["phrases"].push_back({{"text", p.text}, {"span", {p.begin, p.end}}});
    j["frames"] = json::array();
    for (const auto& frame : frames) {
        json dets = json::array();
        for (const auto& d : frame) {
            dets.push_back({{"phrase", d.phrase}, {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}}, {"score", d.score}});
        }
        j["frames"].push_back(std::move(dets));
    }
    if (detector_resolution) j["resolution"] = *detector_resolution;
    return j.dump(2);
}

DetectionAnnotation load_annotation(const std::filesystem::path& path) {
    return DetectionAnnotation::from_json(io::read_file(path));
}

template <typename T>
SceneReport detect_scene_cuts(const Tensor<T>& frames, double threshold) {
    if (frames.rank() != 4) throw ShapeError("frames must be [f,c,w,h], got " + shape_str(frames.shape()));
    const std::size_t per_frame = frames.size() / frames.dim(0);
    SceneReport report;
    for (std::size_t f = 1; f < frames.dim(0); ++f) {
        double acc = 0;
        for (std::size_t i = 0; i < per_frame; ++i) {
            acc += std::abs(static_cast<double>(frames[f * per_frame + i]) -
                            static_cast<double>(frames[(f - 1) * per_frame + i]));
        }
        if (acc / static_cast<double>(per_frame) * 255.0 > threshold) report.cuts.push_back(f);
    }
    return report;
}

std::vector<Track> associate_tokenspan(const DetectionAnnotation& ann, double score_threshold) {
    if (ann.frames.empty()) throw AssociationError("annotation has no frames");
    const std::size_t n = ann.phrases.size();
    const auto first = assign_frame(ann.frames[0], n, score_threshold, nullptr);
    std::vector<bool> allowed(n);
    std::vector<Track> tracks;
    for (std::size_t p = 0; p < n; ++p) {
        if (!first[p]) continue;
        allowed[p] = true;
        tracks.push_back({p, ann.phrases[p].text, {*first[p]}, {true}});
    }
    if (tracks.empty()) {
        throw AssociationError("no phrase in the first frame scores at least " + std::to_string(score_threshold));
    }
    for (std::size_t f = 1; f < ann.frames.size(); ++f) {
        const auto assigned = assign_frame(ann.frames[f], n, score_threshold, &allowed);
        for (auto& t : tracks) {
            const bool seen = assigned[t.phrase].has_value();
            t.boxes.push_back(seen ? *assigned[t.phrase] : t.boxes.back());
            t.observed.push_back(seen);
        }
    }
    return tracks;
}

PixelRect rasterize_box(const Box& box, std::size_t width, std::size_t height) {
    auto axis = [](double lo, double hi, std::size_t n, std::size_t& b, std::size_t& e) {
        const double fn = static_cast<double>(n);
        const double begin = std::clamp(std::floor(lo * fn), 0.0, fn);
        const double end = std::clamp(std::ceil(hi * fn), 0.0, fn);
        if (end > begin) {
            b = static_cast<std::size_t>(begin);
            e = static_cast<std::size_t>(end);
        } else {
            const double mid = std::clamp(std::floor(0.5 * (lo + hi) * fn), 0.0, fn - 1.0);
            b = static_cast<std::size_t>(mid);
            e = b + 1;
        }
    };
    PixelRect r{};
    axis(box.x0, box.x1, width, r.x_begin, r.x_end);
    axis(box.y0, box.y1, height, r.y_begin, r.y_end);
    return r;
}

MaskSequence synthesize_instance_mask(const std::vector<Box>& boxes, std::size_t width, std::size_t height,
                                      Rng& rng, const InstanceMaskOptions& options) {
    if (boxes.empty() || width == 0 || height == 0) throw std::invalid_argument("need boxes and a positive frame size");
    TensorF m({boxes.size(), 1, width, height});
    std::vector<double> outsets;
    if (options.style == MaskStyle::random_shape) {
        if (options.polygon_vertices < 3) throw std::invalid_argument("polygon needs at least 3 vertices");
        for (std::size_t k = 0; k < options.polygon_vertices; ++k) outsets.push_back(rng.uniform(0.0, options.max_outset));
    }
    for (std::size_t f = 0; f < boxes.size(); ++f) {
        auto view = frame_view(m, f);
        PixelRect r = rasterize_box(boxes[f], width, height);
        view.fill(r);
        if (options.style == MaskStyle::dilated) {
            const std::size_t d = options.dilation;
            view.fill({r.x_begin - std::min(r.x_begin, d), std::min(width, r.x_end + d),
                       r.y_begin - std::min(r.y_begin, d), std::min(height, r.y_end + d)});
        } else if (options.style == MaskStyle::random_shape) {
            const double cx = 0.5 * static_cast<double>(r.x_begin + r.x_end);
            const double cy = 0.5 * static_cast<double>(r.y_begin + r.y_end);
            const double hx = 0.5 * static_cast<double>(r.x_end - r.x_begin);
            const double hy = 0.5 * static_cast<double>(r.y_end - r.y_begin);
            const double scale = 2.0 * std::max(hx, hy);
            std::vector<std::pair<double, double>> poly;
            for (std::size_t k = 0; k < outsets.size(); ++k) {
                const double th = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(outsets.size());
                const double c = std::cos(th), s = std::sin(th);
                const double to_edge = std::min(std::abs(c) > 1e-12 ? hx / std::abs(c) : 1e300,
                                                std::abs(s) > 1e-12 ? hy / std::abs(s) : 1e300);
                const double radius = to_edge + outsets[k] * scale;
                poly.emplace_back(cx + radius * c, cy + radius * s);
            }
            for (std::size_t x = 0; x < width; ++x)
                for (std::size_t y = 0; y < height; ++y)
                    if (inside_polygon(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, poly)) view.set(x, y);
        }
    }
    return MaskSequence(std::move(m));
}

RandomMask synthesize_random_mask(std::size_t width, std::size_t height, std::size_t frames, Rng& rng,
                                  const RandomMaskOptions& options) {
    if (width == 0 || height == 0 || frames == 0) throw std::invalid_argument("random mask needs positive dims");
    if (!(options.min_area > 0.0 && options.min_area <= options.max_area && options.max_area <= 1.0)) {
        throw std::invalid_argument("area bounds must satisfy 0 < min <= max <= 1");
    }
    const double total = static_cast<double>(width * height);
    const auto kind = static_cast<RandomMaskKind>(rng.index(3));
    TensorF m({frames, 1, width, height});

    if (kind == RandomMaskKind::static_rect || kind == RandomMaskKind::moving_rect) {
        const auto w_lo = static_cast<std::size_t>(std::ceil(options.min_area * static_cast<double>(width)));
        const std::size_t rw = std::max<std::size_t>(1, w_lo) + rng.index(width - std::max<std::size_t>(1, w_lo) + 1);
        const auto h_lo = static_cast<std::size_t>(std::ceil(options.min_area * total / static_cast<double>(rw)));
        const auto h_hi = std::min(height, static_cast<std::size_t>(std::floor(options.max_area * total / static_cast<double>(rw))));
        const std::size_t lo = std::clamp<std::size_t>(h_lo, 1, height);
        const std::size_t rh = lo >= h_hi ? lo : lo + rng.index(h_hi - lo + 1);
        const std::size_t sx0 = rng.index(width - rw + 1), sy0 = rng.index(height - rh + 1);
        std::size_t sx1 = sx0, sy1 = sy0;
        if (kind == RandomMaskKind::moving_rect) {
            sx1 = rng.index(width - rw + 1);
            sy1 = rng.index(height - rh + 1);
        }
        for (std::size_t f = 0; f < frames; ++f) {
            const double u = frames == 1 ? 0.0 : static_cast<double>(f) / static_cast<double>(frames - 1);
            const auto x = static_cast<std::size_t>(std::lround(static_cast<double>(sx0) + u * (static_cast<double>(sx1) - static_cast<double>(sx0))));
            const auto y = static_cast<std::size_t>(std::lround(static_cast<double>(sy0) + u * (static_cast<double>(sy1) - static_cast<double>(sy0))));
            frame_view(m, f).fill({x, x + rw, y, y + rh});
        }
        return {kind, MaskSequence(std::move(m))};
    }

    // Free-form brush strokes stamped as disks until the drawn area reaches the target.
    const double radius = std::max(1.0, 0.05 * static_cast<double>(std::min(width, height)));
    const double disk = kPi * (radius + 0.5) * (radius + 0.5) / total;
    const double hi = std::max(options.min_area, options.max_area - disk);
    const auto target = static_cast<std::size_t>(std::ceil(rng.uniform(options.min_area, hi) * total));
    auto view = frame_view(m, 0);
    std::size_t painted = 0;
    auto stamp = [&](double px, double py) {
        const auto x_lo = static_cast<long>(std::floor(px - radius)), x_hi = static_cast<long>(std::ceil(px + radius));
        const auto y_lo = static_cast<long>(std::floor(py - radius)), y_hi = static_cast<long>(std::ceil(py + radius));
        for (long x = std::max(0L, x_lo); x <= std::min<long>(static_cast<long>(width) - 1, x_hi); ++x) {
            for (long y = std::max(0L, y_lo); y <= std::min<long>(static_cast<long>(height) - 1, y_hi); ++y) {
                const double dx = static_cast<double>(x) + 0.5 - px, dy = static_cast<double>(y) + 0.5 - py;
                float& cell = view.data[static_cast<std::size_t>(x) * height + static_cast<std::size_t>(y)];
                if (dx * dx + dy * dy <= radius * radius && cell == 0.0f) {
                    cell = 1.0f;
                    ++painted;
                }
            }
        }
    };
    double px = 0, py = 0, angle = 0;
    for (std::size_t step = 0; painted < target; ++step) {
        if (step % 24 == 0) {
            px = rng.uniform(0.0, static_cast<double>(width));
            py = rng.uniform(0.0, static_cast<double>(height));
            angle = rng.uniform(0.0, 2.0 * kPi);
        } else {
            angle += rng.uniform(-kPi / 3.0, kPi / 3.0);
            px = std::clamp(px + radius * std::cos(angle), 0.0, static_cast<double>(width));
            py = std::clamp(py + radius * std::sin(angle), 0.0, static_cast<double>(height));
        }
        stamp(px, py);
    }
    const std::size_t plane = width * height;
    for (std::size_t f = 1; f < frames; ++f) std::copy_n(view.data, plane, m.data().data() + f * plane);
    return {kind, MaskSequence(std::move(m))};
}

const char* to_string(ClipKind kind) {
    switch (kind) {
        case ClipKind::precise: return "precise";
        case ClipKind::random: return "random";
        case ClipKind::null_prompt: return "null_prompt";
    }
    return "unknown";
}

ClipKind draw_clip_kind(Rng& rng, const std::array<double, 3>& probs) {
    double sum = 0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw std::invalid_argument("sampling probabilities must be non-negative");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("sampling probabilities must sum to 1");
    const double u = rng.uniform();
    if (u < probs[0]) return ClipKind::precise;
    if (u < probs[0] + probs[1]) return ClipKind::random;
    return ClipKind::null_prompt;
}

ClipSample sample_training_clip(const DetectionAnnotation& ann, Rng& rng, const SampleOptions& options) {
    const std::size_t frames = ann.frames.size();
    if (frames == 0) throw std::invalid_argument("annotation has no frames");
    ClipSample s;
    s.kind = draw_clip_kind(rng, options.probs);
    if (s.kind == ClipKind::precise) {
        try {
            const auto tracks = associate_tokenspan(ann, options.score_threshold);
            const auto& track = tracks[rng.index(tracks.size())];
            s.masks = synthesize_instance_mask(track.boxes, options.width, options.height, rng, options.instance);
            s.prompt = track.text;
            s.phrase = track.text;
            s.boxes = track.boxes;
            return s;
        } catch (const AssociationError&) {
            s.kind = ClipKind::random;
            s.fell_back = true;
        }
    }
    s.masks = synthesize_random_mask(options.width, options.height, frames, rng, options.random).masks;
    s.prompt = s.kind == ClipKind::null_prompt ? std::string{} : ann.prompt;
    return s;
}

std::string encode_pgm(const MaskSequence& masks, std::size_t frame) {
    if (frame >= masks.frames()) throw std::out_of_range("mask frame out of range");
    const std::size_t w = masks.width(), h = masks.height();
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.push_back(masks.m[(frame * w + x) * h + y] != 0.0f ? '\xff' : '\0');
    return out;
}

bool covers(const MaskSequence& masks, std::size_t frame, const Box& box) {
    const std::size_t w = masks.width(), h = masks.height();
    const PixelRect r = rasterize_box(box, w, h);
    for (std::size_t x = r.x_begin; x < r.x_end; ++x)
        for (std::size_t y = r.y_begin; y < r.y_end; ++y)
            if (masks.m[(frame * w + x) * h + y] == 0.0f) return false;
    return true;
}

template SceneReport detect_scene_cuts(const Tensor<float>&, double);
template SceneReport detect_scene_cuts(const Tensor<double>&, double);

}  // namespace vinpaint::region
