#include "vinpaint/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vinpaint/checkpoint.hpp"
#include "vinpaint/diffusion.hpp"
#include "vinpaint/error.hpp"
#include "vinpaint/io.hpp"
#include "vinpaint/merge.hpp"
#include "vinpaint/metrics.hpp"
#include "vinpaint/motion.hpp"
#include "vinpaint/region.hpp"

namespace vinpaint::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ckpt::Checkpoint;

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw IoError("cannot open " + path);
}

void prepare_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

std::string join(const std::vector<double>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

void require_finite(const TensorF& t, const std::string& what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NumericError(what + " contains non-finite values");
}

// Pads the layer of any checkpoint whose input axis still has `from` channels.
Checkpoint maybe_pad(const Checkpoint& c, const std::string& layer, std::size_t from, std::size_t to) {
    if (layer.empty()) return c;
    auto it = c.find(layer);
    if (it == c.end()) throw MergeError(layer, "pad layer missing from a checkpoint");
    if (it->second.rank() >= 2 && it->second.dim(1) == to) return c;
    return merge::pad_input_channels(c, layer, from, to);
}

struct MergeInputs {
    Checkpoint base, inpaint, personalized;
    merge::TaskVector tau_ip, tau_p;
};

MergeInputs load_merge_inputs(const std::string& base, const std::string& inpaint, const std::string& personalized,
                              const std::string& pad_layer, std::size_t from, std::size_t to) {
    for (const auto* p : {&base, &inpaint, &personalized}) require_file(*p);
    MergeInputs m;
    m.base = maybe_pad(ckpt::load_checkpoint(base), pad_layer, from, to);
    m.inpaint = maybe_pad(ckpt::load_checkpoint(inpaint), pad_layer, from, to);
    m.personalized = maybe_pad(ckpt::load_checkpoint(personalized), pad_layer, from, to);
    m.tau_ip = merge::task_vector(m.inpaint, m.base);
    m.tau_p = merge::task_vector(m.personalized, m.base);
    return m;
}

std::string encode_ppm(const TensorF& pixels, std::size_t frame) {
    const std::size_t c = pixels.dim(1), w = pixels.dim(2), h = pixels.dim(3);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const float v = ch < c ? pixels[((frame * c + ch) * w + x) * h + y] : 0.0f;
                out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
            }
        }
    }
    return out;
}

std::string frame_name(const char* stem, std::size_t i, const char* ext) {
    std::ostringstream os;
    os << stem << '_' << std::setw(3) << std::setfill('0') << i << ext;
    return os.str();
}

region::MaskStyle parse_style(const std::string& s) {
    if (s == "box") return region::MaskStyle::box;
    if (s == "dilated") return region::MaskStyle::dilated;
    if (s == "random_shape") return region::MaskStyle::random_shape;
    throw std::invalid_argument("unknown mask style " + s);
}

const char* random_kind_name(region::RandomMaskKind k) {
    switch (k) {
        case region::RandomMaskKind::static_rect: return "static_rect";
        case region::RandomMaskKind::moving_rect: return "moving_rect";
        case region::RandomMaskKind::stroke: return "stroke";
    }
    return "unknown";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Video inpainting toolkit: checkpoint merging, mask generation, toy training and sampling"};
    app.name("vinpaint");
    app.require_subcommand(1);

    // merge
    std::string base_path, inpaint_path, personalized_path, pad_layer, out_path, report_path;
    double alpha = 1.0, beta = 1.0;
    std::size_t pad_from = 4, pad_to = 9;
    auto* merge_cmd = app.add_subcommand("merge", "Blend inpainting and personalized task vectors into a base");
    for (auto* cmd : {merge_cmd}) {
        cmd->add_option("--base", base_path, "Base generation checkpoint")->required();
        cmd->add_option("--inpaint", inpaint_path, "Inpainting checkpoint")->required();
        cmd->add_option("--personalized", personalized_path, "Personalized generation checkpoint")->required();
    }
    merge_cmd->add_option("--alpha", alpha, "Inpainting task-vector weight")->capture_default_str();
    merge_cmd->add_option("--beta", beta, "Personalized task-vector weight")->capture_default_str();
    merge_cmd->add_option("--pad-layer", pad_layer, "Input layer zero-padded from --pad-from to --pad-to channels");
    merge_cmd->add_option("--pad-from", pad_from)->capture_default_str();
    merge_cmd->add_option("--pad-to", pad_to)->capture_default_str();
    merge_cmd->add_option("--out", out_path, "Merged checkpoint")->required();
    merge_cmd->add_option("--report", report_path, "Unmatched-keys report (default <out>.unmatched.txt)");

    // sweep
    std::vector<double> alphas = merge::default_sweep_grid(), betas = merge::default_sweep_grid();
    auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate a grid of merge weights");
    sweep_cmd->add_option("--base", base_path)->required();
    sweep_cmd->add_option("--inpaint", inpaint_path)->required();
    sweep_cmd->add_option("--personalized", personalized_path)->required();
    sweep_cmd->add_option("--pad-layer", pad_layer);
    sweep_cmd->add_option("--pad-from", pad_from)->capture_default_str();
    sweep_cmd->add_option("--pad-to", pad_to)->capture_default_str();
    sweep_cmd->add_option("--alphas", alphas)->delimiter(',')->capture_default_str();
    sweep_cmd->add_option("--betas", betas)->delimiter(',')->capture_default_str();
    sweep_cmd->add_option("--out", out_path, "CSV grid")->required();

    // mask-gen
    std::string annotations_path, mode = "sample", out_dir, style = "random_shape";
    std::vector<double> probs{0.7, 0.2, 0.1};
    std::uint64_t seed = 0;
    std::size_t width = 64, height = 48;
    double score_threshold = 0.2;
    bool verify = false;
    auto* mask_cmd = app.add_subcommand("mask-gen", "Generate training masks from an annotation file");
    mask_cmd->add_option("--annotations", annotations_path)->required();
    mask_cmd->add_option("--mode", mode, "instance | random | sample")
        ->check(CLI::IsMember({"instance", "random", "sample"}))
        ->capture_default_str();
    mask_cmd->add_option("--probs", probs, "precise,random,null_prompt")->delimiter(',')->capture_default_str();
    mask_cmd->add_option("--seed", seed)->capture_default_str();
    mask_cmd->add_option("--width", width)->capture_default_str();
    mask_cmd->add_option("--height", height)->capture_default_str();
    mask_cmd->add_option("--style", style, "box | dilated | random_shape")->capture_default_str();
    mask_cmd->add_option("--threshold", score_threshold, "Detection score threshold")->capture_default_str();
    mask_cmd->add_option("--out-dir", out_dir)->required();
    mask_cmd->add_flag("--verify", verify, "Check that instance masks cover their boxes");

    // train-toy
    std::string config_path;
    auto* train_cmd = app.add_subcommand("train-toy", "Train the toy denoiser on synthetic clips");
    train_cmd->add_option("--config", config_path, "key = value training config")->required();
    train_cmd->add_option("--out-dir", out_dir, "Receives toy.ckpt and loss.csv")->required();

    // sample
    std::string ckpt_path, prompt = "a red ball bouncing";
    std::size_t steps = 50, frames = 8, latent_w = 16, latent_h = 12;
    double cfg = 14.0;
    std::uint64_t clip_seed = 0;
    auto* sample_cmd = app.add_subcommand("sample", "DDIM inpainting of a synthetic clip with a trained toy denoiser");
    sample_cmd->add_option("--ckpt", ckpt_path)->required();
    sample_cmd->add_option("--steps", steps)->capture_default_str();
    sample_cmd->add_option("--cfg", cfg)->capture_default_str();
    sample_cmd->add_option("--seed", seed)->capture_default_str();
    sample_cmd->add_option("--clip-seed", clip_seed)->capture_default_str();
    sample_cmd->add_option("--frames", frames)->capture_default_str();
    sample_cmd->add_option("--latent-w", latent_w)->capture_default_str();
    sample_cmd->add_option("--latent-h", latent_h)->capture_default_str();
    sample_cmd->add_option("--prompt", prompt)->capture_default_str();
    sample_cmd->add_option("--out", out_dir, "Output directory")->required();

    // analyze
    std::string a_path, b_path, per_tensor_path;
    auto* analyze_cmd = app.add_subcommand("analyze", "Per-layer cosine similarity between two checkpoints");
    analyze_cmd->add_option("--a", a_path)->required();
    analyze_cmd->add_option("--b", b_path)->required();
    analyze_cmd->add_option("--out", out_path, "Grouped CSV")->required();
    analyze_cmd->add_option("--per-tensor", per_tensor_path, "Optional per-tensor CSV");

    // cost-report
    std::uint64_t cb = 1, cf = 16, cc = 320, cw = 8, ch = 8, ctw = 4, cth = 4, cl = 77;
    auto* cost_cmd = app.add_subcommand("cost-report", "Attention map sizes for temporal, global, damped and cross attention");
    cost_cmd->add_option("--b", cb)->capture_default_str();
    cost_cmd->add_option("--f", cf)->capture_default_str();
    cost_cmd->add_option("--c", cc)->capture_default_str();
    cost_cmd->add_option("--w1", cw)->capture_default_str();
    cost_cmd->add_option("--h1", ch)->capture_default_str();
    cost_cmd->add_option("--target-w", ctw)->capture_default_str();
    cost_cmd->add_option("--target-h", cth)->capture_default_str();
    cost_cmd->add_option("--l-text", cl)->capture_default_str();

    // scene-cuts
    std::string entry = "frames";
    double scene_threshold = 20.0;
    auto* scene_cmd = app.add_subcommand("scene-cuts", "Detect scene cuts in a frame tensor stored in a checkpoint");
    scene_cmd->add_option("--frames", ckpt_path, "Checkpoint holding an [f,c,w,h] tensor on a [0,1] scale")->required();
    scene_cmd->add_option("--entry", entry)->capture_default_str();
    scene_cmd->add_option("--threshold", scene_threshold)->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (*merge_cmd) {
            if (report_path.empty()) report_path = out_path + ".unmatched.txt";
            out << "merge base=" << base_path << " inpaint=" << inpaint_path << " personalized=" << personalized_path
                << " alpha=" << alpha << " beta=" << beta << " pad_layer=" << pad_layer << " pad=" << pad_from << "->"
                << pad_to << " out=" << out_path << "\n";
            const auto in = load_merge_inputs(base_path, inpaint_path, personalized_path, pad_layer, pad_from, pad_to);
            const auto result = merge::merge(in.base, in.tau_ip.delta, in.tau_p.delta, {alpha, beta});
            for (const auto& [name, t] : result.merged) require_finite(t, name);
            for (const auto& w : result.warnings) err << "warning: " << w << "\n";
            std::string report = "# inpaint vs base\n" + in.tau_ip.unmatched.to_text() + "# personalized vs base\n" +
                                 in.tau_p.unmatched.to_text() + "# excluded from merge\n";
            for (const auto& k : result.unmatched) report += k + "\n";
            ckpt::save_checkpoint(result.merged, out_path);
            io::write_file_atomic(report_path, report);
            out << "merged " << result.merged.size() << " tensors, " << result.unmatched.size()
                << " unmatched (see " << report_path << ")\n";
            return kOk;
        }
        if (*sweep_cmd) {
            out << "sweep alphas=" << join(alphas) << " betas=" << join(betas) << " pad_layer=" << pad_layer
                << " out=" << out_path << "\n";
            const auto in = load_merge_inputs(base_path, inpaint_path, personalized_path, pad_layer, pad_from, pad_to);
            const auto inpaint = in.inpaint;
            const auto result = merge::sensitivity_sweep(
                in.base, in.tau_ip.delta, in.tau_p.delta, alphas, betas, [&inpaint](const Checkpoint& merged) {
                    return std::map<std::string, double>{
                        {"frobenius", merge::frobenius_norm(merged)},
                        {"distance_to_inpaint", merge::frobenius_norm(merge::task_vector(merged, inpaint).delta)}};
                });
            io::write_file_atomic(out_path, result.to_csv());
            out << "evaluated " << result.cells.size() << " cells\n";
            return kOk;
        }
        if (*mask_cmd) {
            out << "mask-gen annotations=" << annotations_path << " mode=" << mode << " probs=" << join(probs)
                << " seed=" << seed << " size=" << width << "x" << height << " style=" << style
                << " threshold=" << score_threshold << " out_dir=" << out_dir << "\n";
            if (probs.size() != 3) throw std::invalid_argument("--probs needs exactly three values");
            double sum = 0;
            for (double p : probs) {
                if (!(p >= 0.0)) throw std::invalid_argument("--probs values must be non-negative");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("--probs must sum to 1, got " + join(probs));
            if (width == 0 || height == 0) throw std::invalid_argument("--width and --height must be positive");
            require_file(annotations_path);
            const auto ann = region::load_annotation(annotations_path);
            Rng rng(seed);
            region::SampleOptions opts;
            opts.width = width;
            opts.height = height;
            opts.probs = {probs[0], probs[1], probs[2]};
            opts.score_threshold = score_threshold;
            opts.instance.style = parse_style(style);

            region::ClipSample sample;
            std::optional<region::RandomMaskKind> random_kind;
            if (mode == "instance") {
                const auto tracks = region::associate_tokenspan(ann, score_threshold);
                const auto& track = tracks[rng.index(tracks.size())];
                sample.kind = region::ClipKind::precise;
                sample.masks = region::synthesize_instance_mask(track.boxes, width, height, rng, opts.instance);
                sample.prompt = track.text;
                sample.phrase = track.text;
                sample.boxes = track.boxes;
            } else if (mode == "random") {
                auto rm = region::synthesize_random_mask(width, height, ann.frames.size(), rng, opts.random);
                sample.kind = region::ClipKind::random;
                sample.masks = std::move(rm.masks);
                sample.prompt = ann.prompt;
                random_kind = rm.kind;
            } else {
                sample = region::sample_training_clip(ann, rng, opts);
            }
            if (verify) {
                for (std::size_t f = 0; f < sample.boxes.size(); ++f) {
                    if (!region::covers(sample.masks, f, sample.boxes[f])) {
                        throw std::invalid_argument("verify: frame " + std::to_string(f) + " mask misses its box");
                    }
                }
                out << "verify: ok (" << sample.boxes.size() << " boxed frames)\n";
            }
            prepare_dir(out_dir);
            json manifest;
            manifest["kind"] = region::to_string(sample.kind);
            manifest["prompt"] = sample.prompt;
            if (sample.phrase) manifest["phrase"] = *sample.phrase;
            if (random_kind) manifest["random_kind"] = random_kind_name(*random_kind);
            manifest["fell_back"] = sample.fell_back;
            manifest["seed"] = seed;
            manifest["width"] = width;
            manifest["height"] = height;
            manifest["masks"] = json::array();
            for (std::size_t f = 0; f < sample.masks.frames(); ++f) {
                const auto name = frame_name("mask", f, ".pgm");
                io::write_file_atomic(fs::path(out_dir) / name, region::encode_pgm(sample.masks, f));
                manifest["masks"].push_back(name);
            }
            io::write_file_atomic(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
            out << "kind=" << region::to_string(sample.kind) << " frames=" << sample.masks.frames() << "\n";
            return kOk;
        }
        if (*train_cmd) {
            require_file(config_path);
            const auto config = diffusion::TrainConfig::parse(io::read_file(config_path));
            out << "train-toy " << config.to_string() << " out_dir=" << out_dir << "\n";
            if (config.clips == 0 || config.frames == 0 || config.latent_w == 0 || config.latent_h == 0) {
                throw std::invalid_argument("clips, frames and latent sizes must be positive");
            }
            const diffusion::ToyCodec codec;
            const diffusion::ToyTextEncoder text_encoder(config.model.d_text);
            std::vector<diffusion::TrainingExample<float>> dataset;
            for (std::size_t i = 0; i < config.clips; ++i) {
                dataset.push_back(diffusion::make_synthetic_example<float>(config.frames, config.latent_w,
                                                                           config.latent_h, codec, text_encoder,
                                                                           config.prompt, config.seed + i));
            }
            const auto sched = diffusion::build_schedule(config.model.timesteps, config.beta_start, config.beta_end);
            auto result = diffusion::train_toy(diffusion::init_toy_denoiser<float>(config.seed, config.model), dataset,
                                               sched, config);
            for (double l : result.losses)
                if (!std::isfinite(l)) throw NumericError("training loss became non-finite");
            prepare_dir(out_dir);
            ckpt::save_checkpoint(diffusion::to_checkpoint(result.params, config.model), fs::path(out_dir) / "toy.ckpt");
            io::write_file_atomic(fs::path(out_dir) / "loss.csv", diffusion::loss_csv(result.losses));
            if (!result.losses.empty()) {
                out << "loss initial=" << result.losses.front() << " final=" << result.losses.back()
                    << " ratio=" << result.losses.back() / result.losses.front() << "\n";
            }
            return kOk;
        }
        if (*sample_cmd) {
            out << "sample ckpt=" << ckpt_path << " steps=" << steps << " cfg=" << cfg << " seed=" << seed
                << " clip_seed=" << clip_seed << " frames=" << frames << " latent=" << latent_w << "x" << latent_h
                << " prompt=\"" << prompt << "\" out=" << out_dir << "\n";
            require_file(ckpt_path);
            diffusion::DenoiserConfig model;
            auto params = diffusion::from_checkpoint(ckpt::load_checkpoint(ckpt_path), &model);
            const auto sched = diffusion::build_schedule(model.timesteps);
            const diffusion::ToyCodec codec;
            const diffusion::ToyTextEncoder text_encoder(model.d_text);
            const auto clip = diffusion::make_synthetic_example<float>(frames, latent_w, latent_h, codec, text_encoder,
                                                                       prompt, clip_seed);
            diffusion::InpaintRequest<float> req{clip.mask, clip.z_masked, clip.z0, clip.text,
                                                 diffusion::null_text_embedding<float>(model.d_text)};
            diffusion::SamplerOptions sopts;
            sopts.steps = steps;
            sopts.guidance_scale = cfg;
            sopts.seed = seed;
            const auto result = diffusion::ddim_sample(diffusion::make_toy_denoiser(std::move(params)), req, sched, sopts);
            require_finite(result.latents.z, "sampled latents");

            const TensorF decoded = codec.decode(result.latents);
            const TensorF original = codec.decode(clip.z0);
            const TensorF latent_mask = clip.mask.resized<float>(latent_w, latent_h);
            // Background check at latent resolution, where compositing is exact.
            TensorF binary_mask = latent_mask;
            for (auto& v : binary_mask.data()) v = v > 0.0f ? 1.0f : 0.0f;
            const metrics::RandomProjectionProvider provider(16, codec.pixel_channels(), seed);
            metrics::MetricRow row = metrics::evaluate_clip(provider, "clip" + std::to_string(clip_seed), original,
                                                            decoded, clip.mask, prompt);
            row.bp = metrics::background_preservation(clip.z0.z, result.latents.z,
                                                      diffusion::MaskSequence(std::move(binary_mask)));

            prepare_dir(out_dir);
            ckpt::save_checkpoint({{"latents", result.latents.z}, {"known", clip.z0.z}, {"mask", clip.mask.m}},
                                  fs::path(out_dir) / "latents.ckpt");
            for (std::size_t f = 0; f < frames; ++f) {
                io::write_file_atomic(fs::path(out_dir) / frame_name("frame", f, ".ppm"), encode_ppm(decoded, f));
            }
            io::write_file_atomic(fs::path(out_dir) / "metrics.csv", metrics::to_csv({row}));
            out << metrics::to_csv({row});
            return kOk;
        }
        if (*analyze_cmd) {
            out << "analyze a=" << a_path << " b=" << b_path << " out=" << out_path << "\n";
            require_file(a_path);
            require_file(b_path);
            const auto report = merge::layer_similarity_report(ckpt::load_checkpoint(a_path), ckpt::load_checkpoint(b_path));
            io::write_file_atomic(out_path, report.to_csv());
            if (!per_tensor_path.empty()) {
                std::ostringstream os;
                os.precision(10);
                os << "name,type,region,cosine\n";
                for (const auto& t : report.tensors) {
                    os << t.name << ',' << (t.type ? merge::to_string(*t.type) : "unclassified") << ','
                       << (t.region ? merge::to_string(*t.region) : "unclassified") << ',';
                    if (t.cosine) os << *t.cosine;
                    else os << "undefined";
                    os << '\n';
                }
                io::write_file_atomic(per_tensor_path, os.str());
            }
            out << report.to_csv();
            return kOk;
        }
        if (*cost_cmd) {
            const auto report = motion::attention_cost_report(cb, cf, cc, cw, ch, {ctw, cth}, cl);
            out << report.to_table();
            return kOk;
        }
        if (*scene_cmd) {
            out << "scene-cuts frames=" << ckpt_path << " entry=" << entry << " threshold=" << scene_threshold << "\n";
            require_file(ckpt_path);
            const auto c = ckpt::load_checkpoint(ckpt_path);
            auto it = c.find(entry);
            if (it == c.end()) throw std::invalid_argument("checkpoint has no entry " + entry);
            const auto report = region::detect_scene_cuts(it->second, scene_threshold);
            out << "cuts:";
            for (auto i : report.cuts) out << ' ' << i;
            out << "\nsingle_scene: " << (report.single_scene() ? "yes" : "no") << "\n";
            return kOk;
        }
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const FormatError& e) {
        err << "error: format: " << e.what() << "\n";
        return kIo;
    } catch (const LoadError& e) {
        err << "error: load: " << e.what() << "\n";
        return kIo;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const MergeError& e) {
        err << "error: key " << e.key() << ": " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kValidation;
}

}  // namespace vinpaint::cli
