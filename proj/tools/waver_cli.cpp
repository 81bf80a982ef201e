#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "waver/error.hpp"
#include "waver/experiments.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace waver;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out = "runs/default";
};

RunConfig load_config(const Common& c) {
    ConfigMap kv;
    if (!c.config_file.empty()) kv = parse_config_file(c.config_file);
    for (const auto& [k, v] : parse_overrides(c.overrides)) kv[k] = v;
    return make_run_config(kv);
}

RunConfig run_config(const fs::path& run) { return make_run_config(parse_config_file((run / "config.txt").string())); }

HybridDiT load_run_model(const fs::path& run) {
    const RunConfig cfg = run_config(run);
    HybridDiT model(cfg.model, cfg.seed);
    load_model_parameters(model, load_checkpoint(run / "checkpoint.bin"));
    return model;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config_file, "key = value config file");
    sub->add_option("-s,--set", c.overrides, "key=value override (repeatable)");
    sub->add_option("-o,--out", c.out, "run directory");
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    WAVER_REQUIRE(f.good(), IoError, "cannot write " + path.string());
    f << j.dump(2) << '\n';
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream f(path);
    WAVER_REQUIRE(f.good(), IoError, "cannot write " + path.string());
    f << std::setprecision(17);
    return f;
}

int cmd_train(const Common& c, int steps, const std::string& init, const std::string& resume) {
    RunConfig cfg = load_config(c);
    if (steps >= 0) cfg.optim.steps = steps;
    const fs::path dir = c.out;
    prepare_run_dir(dir, cfg, "train");
    Trainer tr(cfg);
    if (!init.empty()) tr.init_model_from(load_checkpoint(init));
    if (!resume.empty()) tr.load(resume);
    tr.set_failure_path(dir / "last_good.bin");
    auto csv = open_csv(dir / "metrics.csv");
    csv << "step,fm_loss,align_loss,lr,grad_norm\n";
    const int remaining = std::max(0, cfg.optim.steps - tr.step_index());
    tr.train(remaining, [&](const StepMetrics& m) {
        csv << m.step << ',' << m.fm_loss << ',' << m.align_loss << ',' << m.lr << ',' << m.grad_norm << '\n';
        if (cfg.log_every > 0 && (m.step % cfg.log_every == 0 || m.step + 1 == cfg.optim.steps))
            std::cout << "step " << m.step << " fm_loss " << m.fm_loss << " align_loss " << m.align_loss << " lr "
                      << m.lr << std::endl;
    });
    tr.save(dir / "checkpoint.bin");
    std::cout << "wrote " << (dir / "checkpoint.bin").string() << " after " << tr.step_index() << " steps\n";
    return 0;
}

int cmd_sample(const std::string& run, const std::string& kind, int n, std::uint64_t seed,
               const std::vector<std::string>& overrides, const std::string& out) {
    RunConfig cfg = run_config(run);
    cfg.apply(parse_overrides(overrides));
    cfg.validate();
    const HybridDiT model = load_run_model(run);
    const TaskKind k = task_kind_from_string(kind);
    DataConfig data = cfg.data;
    if (k == TaskKind::T2I) data.frames = 1;
    const auto sources = heldout_sources(data, n, seed);
    const auto rep = generate(model, cfg.sampler, k, sources, seed);
    const fs::path dir = out.empty() ? fs::path(run) / "samples" : fs::path(out);
    fs::create_directories(dir);
    TensorList tensors;
    auto csv = open_csv(dir / "samples.csv");
    csv << "sample,presence,motion\n";
    for (std::size_t i = 0; i < rep.samples.size(); ++i) {
        render_frames(rep.samples[i], dir, "sample" + std::to_string(i));
        tensors.push_back({"sample." + std::to_string(i), rep.samples[i].data});
        csv << i << ',' << rep.presence[i] << ',' << (i < rep.motion.size() ? rep.motion[i] : 0.0) << '\n';
    }
    save_checkpoint(dir / "samples.bin", tensors);
    write_json(dir / "summary.json", {{"kind", kind},
                                      {"samples", n},
                                      {"seed", seed},
                                      {"mean_presence", rep.mean_presence},
                                      {"mean_motion", rep.mean_motion},
                                      {"condition_exact", rep.condition_exact},
                                      {"macs", rep.macs}});
    std::cout << "mean presence " << rep.mean_presence << " mean motion " << rep.mean_motion << " macs " << rep.macs
              << "\n";
    return 0;
}

int cmd_refine(const std::string& base_run, const std::string& refiner_run, int n, std::uint64_t seed,
               const std::string& out, double w_d) {
    const RunConfig base_cfg = run_config(base_run), ref_cfg = run_config(refiner_run);
    const HybridDiT base = load_run_model(base_run), refiner = load_run_model(refiner_run);
    const auto sources = heldout_sources(base_cfg.data, n, seed);
    const auto first = generate(base, base_cfg.sampler, TaskKind::T2V, sources, seed);
    const fs::path dir = out.empty() ? fs::path(refiner_run) / "refined" : fs::path(out);
    RefineOptions opt;
    opt.n_steps = ref_cfg.refine_steps;
    opt.shift = ref_cfg.timesteps.shift;
    if (w_d > 0.0) opt.w_d = w_d;
    std::uint64_t macs = first.macs;
    for (std::size_t i = 0; i < first.samples.size(); ++i) {
        Rng rng(derive_seed(seed, {0xDEF, i}));
        const auto r = refine(first.samples[i].data, refiner, ref_cfg.degrade, opt, rng);
        macs += r.macs;
        render_frames(LatentVideo(r.refined), dir, "refined" + std::to_string(i));
        render_frames(LatentVideo(r.upsampled), dir, "upsampled" + std::to_string(i));
    }
    std::cout << "refined " << n << " samples, two-stage macs " << macs << "\n";
    return 0;
}

int cmd_ablate_streams(const Common& c, int steps, int window, int seeds) {
    const RunConfig cfg = load_config(c);
    const fs::path dir = c.out;
    prepare_run_dir(dir, cfg, "ablate-streams");
    json summary = json::array();
    for (int s = 0; s < seeds; ++s) {
        RunConfig run = cfg;
        run.seed = cfg.seed + std::uint64_t(s);
        const auto curves = ablate_streams(run, default_stream_layouts(), steps, window);
        auto csv = open_csv(dir / ("curves_seed" + std::to_string(run.seed) + ".csv"));
        write_curves_csv(csv, curves);
        for (const auto& cv : curves) {
            summary.push_back({{"seed", run.seed},
                               {"layout", cv.name},
                               {"params", cv.params},
                               {"mlp_hidden", cv.model.mlp_width()},
                               {"final_smoothed", cv.smoothed.back()}});
            std::cout << "seed " << run.seed << ' ' << cv.name << " params " << cv.params << " final smoothed loss "
                      << cv.smoothed.back() << "\n";
        }
    }
    write_json(dir / "summary.json", summary);
    return 0;
}

int cmd_ablate_sampler(const Common& c, int steps, int samples) {
    const RunConfig cfg = load_config(c);
    const fs::path dir = c.out;
    prepare_run_dir(dir, cfg, "ablate-sampler");
    const auto arms = ablate_sampler(cfg, steps, samples);
    auto csv = open_csv(dir / "sampler_ablation.csv");
    csv << "arm,final_loss,timestep_ks,mean_motion,mean_presence\n";
    for (const auto& a : arms) {
        csv << a.name << ',' << smooth_trailing(a.loss, 50).back() << ',' << a.timestep_ks << ','
            << a.generation.mean_motion << ',' << a.generation.mean_presence << '\n';
        std::cout << a.name << " mean motion " << a.generation.mean_motion << " timestep ks " << a.timestep_ks
                  << "\n";
    }
    return 0;
}

int cmd_ablate_joint(const Common& c, int steps, int samples) {
    const RunConfig cfg = load_config(c);
    const fs::path dir = c.out;
    prepare_run_dir(dir, cfg, "ablate-joint-i2v");
    Trainer probe(cfg);
    const double train_motion = probe.dataset().mean_motion();
    const auto arms = ablate_joint_i2v(cfg, steps, samples, cfg.data.p_i2v > 0.0 ? cfg.data.p_i2v : 0.2);
    auto csv = open_csv(dir / "joint_i2v_ablation.csv");
    csv << "arm,p_i2v,final_loss,i2v_mean_motion,train_mean_motion\n";
    for (const auto& a : arms) {
        csv << a.name << ',' << a.p_i2v << ',' << smooth_trailing(a.loss, 50).back() << ',' << a.i2v.mean_motion
            << ',' << train_motion << '\n';
        std::cout << a.name << " I2V mean motion " << a.i2v.mean_motion << " (training set " << train_motion << ")\n";
    }
    return 0;
}

int cmd_pack_stats(const Common& c) {
    const RunConfig cfg = load_config(c);
    const Trainer tr(cfg);
    const auto s = pack_stats(tr);
    std::cout << "samples " << s.samples << "\nspfhp bins " << s.spfhp_bins << " efficiency " << s.spfhp_efficiency
              << "\nffd bins " << s.ffd_bins << " efficiency " << s.ffd_efficiency << "\nlower bound "
              << s.lower_bound << "\npad tokens per epoch " << s.pad_tokens << "\n";
    const fs::path dir = c.out;
    fs::create_directories(dir);
    std::ofstream plan(dir / "pack_plan.txt");
    WAVER_REQUIRE(plan.good(), IoError, "cannot write " + (dir / "pack_plan.txt").string());
    write_pack_plan(plan, tr.pack_plan());
    return 0;
}

int cmd_attn_stats(const std::string& run, const std::vector<double>& ts, int top_k, std::uint64_t seed,
                   const std::string& out) {
    const RunConfig cfg = run_config(run);
    const HybridDiT model = load_run_model(run);
    const auto src = heldout_sources(cfg.data, 1, seed).front();
    const TaskSample req = make_task_sample(TaskKind::T2V, src.video, prompt_tokens(src.style_tag, src.caption),
                                            src.style_tag);
    Rng rng(seed);
    const auto recs = [&] {
        std::vector<AttentionRecord> all;
        for (double t : ts) {
            const auto fm = fm_pair(src.video.data, t, rng);
            const DiTSample s{build_unified_input(req, LatentVideo(fm.x_t)), req.caption_tokens, t};
            for (auto& r : attention_stats(model, s, {t}, top_k)) all.push_back(r);
        }
        return all;
    }();
    const fs::path path = out.empty() ? fs::path(run) / "attn_stats.csv" : fs::path(out);
    auto csv = open_csv(path);
    csv << "t,layer,head,mean_entropy,mean_topk_mass,log_keys\n";
    for (const auto& r : recs)
        csv << r.t << ',' << r.stats.layer << ',' << r.stats.head << ',' << r.stats.mean_entropy << ','
            << r.stats.mean_topk_mass << ',' << r.stats.mean_log_keys << '\n';
    std::cout << "wrote " << recs.size() << " records to " << path.string() << "\n";
    return 0;
}

int cmd_average(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<TensorList> models;
    for (const auto& p : inputs) models.push_back(load_checkpoint(p));
    save_checkpoint(out, average_models(models));
    std::cout << "averaged " << inputs.size() << " checkpoints into " << out << "\n";
    return 0;
}

int cmd_render(const std::string& input, const std::string& name, std::int64_t sprite_seed, int frames, int height,
               int width, const std::string& out) {
    LatentVideo v;
    if (!input.empty()) {
        v = LatentVideo(find_tensor(load_checkpoint(input), name));
    } else {
        WAVER_REQUIRE(sprite_seed >= 0, ContractError, "render needs --input or --sprite-seed");
        v = sprite_video_from_seed(std::uint64_t(sprite_seed), frames, height, width).video;
    }
    const auto stats = render_frames(v, out);
    std::cout << "rendered " << stats.size() << " frames into " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"waver: toy-scale task-unified video diffusion"};
    app.require_subcommand(1);

    Common common;
    int steps = -1, window = 200, seeds = 3, samples = 64, n = 8, top_k = 4, frames = 4, height = 16, width = 16;
    std::uint64_t seed = 1;
    std::int64_t sprite_seed = -1;
    double w_d = -1.0;
    std::string init, resume, run, base_run, kind = "t2v", out, name = "sample.0", input;
    std::vector<std::string> overrides, inputs;
    std::vector<double> timesteps{0.1, 0.5, 0.9};

    auto* train = app.add_subcommand("train", "train one stage");
    add_common(train, common);
    train->add_option("--steps", steps, "training steps (overrides optim.steps)");
    train->add_option("--init", init, "initialize model parameters from a checkpoint");
    train->add_option("--resume", resume, "resume from a trainer checkpoint");

    auto* sample = app.add_subcommand("sample", "generate from a trained run");
    sample->add_option("--run", run, "run directory with config.txt and checkpoint.bin")->required();
    sample->add_option("--kind", kind, "t2v, i2v or t2i");
    sample->add_option("-n,--count", n, "number of samples");
    sample->add_option("--seed", seed, "sampling seed");
    sample->add_option("-s,--set", overrides, "sampler overrides such as sample.guidance=apg");
    sample->add_option("-o,--out", out, "output directory");

    auto* refine_cmd = app.add_subcommand("refine", "two-stage generation: base sample then refiner");
    refine_cmd->add_option("--base", base_run, "first-stage run directory")->required();
    refine_cmd->add_option("--refiner", run, "refiner run directory")->required();
    refine_cmd->add_option("-n,--count", n, "number of samples");
    refine_cmd->add_option("--seed", seed, "sampling seed");
    refine_cmd->add_option("--wd", w_d, "fixed degradation weight (edit strength)");
    refine_cmd->add_option("-o,--out", out, "output directory");

    auto* streams = app.add_subcommand("ablate-streams", "hybrid vs dual vs single stream loss curves");
    add_common(streams, common);
    streams->add_option("--steps", steps, "steps per layout")->default_val(2000);
    streams->add_option("--window", window, "smoothing window");
    streams->add_option("--seeds", seeds, "number of consecutive seeds");

    auto* sampler = app.add_subcommand("ablate-sampler", "logit-normal vs mode timestep sampling");
    add_common(sampler, common);
    sampler->add_option("--steps", steps, "training steps per arm")->default_val(1000);
    sampler->add_option("--samples", samples, "generated samples per arm");

    auto* joint = app.add_subcommand("ablate-joint-i2v", "joint T2V/I2V vs I2V-only training");
    add_common(joint, common);
    joint->add_option("--steps", steps, "training steps per arm")->default_val(1000);
    joint->add_option("--samples", samples, "generated samples per arm");

    auto* pack = app.add_subcommand("pack-stats", "packing efficiency of the configured pool");
    add_common(pack, common);

    auto* attn = app.add_subcommand("attn-stats", "attention entropy and top-k mass per layer and head");
    attn->add_option("--run", run, "run directory")->required();
    attn->add_option("--t", timesteps, "timesteps")->delimiter(',');
    attn->add_option("--top-k", top_k, "top-k keys");
    attn->add_option("--seed", seed, "input seed");
    attn->add_option("-o,--out", out, "csv path");

    auto* avg = app.add_subcommand("average", "elementwise mean of checkpoints");
    avg->add_option("inputs", inputs, "checkpoints")->required();
    avg->add_option("-o,--out", out, "output checkpoint")->required();

    auto* render = app.add_subcommand("render", "write frames of a latent as PPM images");
    render->add_option("--input", input, "checkpoint holding the latent");
    render->add_option("--name", name, "tensor name inside --input");
    render->add_option("--sprite-seed", sprite_seed, "render a synthetic sprite video instead");
    render->add_option("--frames", frames);
    render->add_option("--height", height);
    render->add_option("--width", width);
    render->add_option("-o,--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(common, steps, init, resume);
        if (*sample) return cmd_sample(run, kind, n, seed, overrides, out);
        if (*refine_cmd) return cmd_refine(base_run, run, n, seed, out, w_d);
        if (*streams) return cmd_ablate_streams(common, steps, window, seeds);
        if (*sampler) return cmd_ablate_sampler(common, steps, samples);
        if (*joint) return cmd_ablate_joint(common, steps, samples);
        if (*pack) return cmd_pack_stats(common);
        if (*attn) return cmd_attn_stats(run, timesteps, top_k, seed, out);
        if (*avg) return cmd_average(inputs, out);
        if (*render) return cmd_render(input, name, sprite_seed, frames, height, width, out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
