#include "waver/trainer.hpp"

#include <cmath>

#include "waver/error.hpp"
#include "waver/refiner.hpp"
#include "waver/sampler.hpp"
#include "waver/schedules.hpp"

namespace waver {

namespace {

constexpr std::uint64_t kEpochStream = 0xE90C;
constexpr std::uint64_t kProjectorStream = 0xA119;

bool is_matrix(const Tensor& t) { return t.ndim() >= 2; }

}  // namespace

// ---- optimizer -------------------------------------------------------------

double global_grad_norm(const std::vector<ParamStore*>& stores) {
    double s = 0.0;
    for (auto* st : stores)
        for (const auto& p : st->list())
            for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
}

double AdamW::step(const std::vector<ParamStore*>& stores, double lr) {
    const double norm = global_grad_norm(stores);
    if (!std::isfinite(norm)) throw NumericDivergence("non-finite gradient norm", int(t_));
    const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_)), bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto* st : stores)
        for (const auto& p : st->list()) {
            Tensor param = p.tensor;
            auto& m = m_[p.name];
            auto& v = v_[p.name];
            if (m.empty()) {
                m.assign(param.numel(), 0.0);
                v.assign(param.numel(), 0.0);
                order_.push_back(p.name);
            }
            const auto g = param.grad();
            auto w = param.mutable_data();
            const double decay = is_matrix(param) ? cfg_.weight_decay : 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i] * clip;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mh = m[i] / bc1, vh = v[i] / bc2;
                w[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + decay * w[i]);
            }
        }
    return norm;
}

TensorList AdamW::state() const {
    TensorList out;
    out.push_back({"optim.t", Tensor::scalar(double(t_))});
    for (const auto& name : order_) {
        const auto& m = m_.at(name);
        out.push_back({"optim.m." + name, Tensor::from({m.size()}, m)});
        out.push_back({"optim.v." + name, Tensor::from({m.size()}, v_.at(name))});
    }
    return out;
}

void AdamW::load_state(const TensorList& records) {
    m_.clear();
    v_.clear();
    order_.clear();
    t_ = 0;
    for (const auto& r : records) {
        if (r.name == "optim.t") t_ = long(r.tensor.item());
        else if (r.name.rfind("optim.m.", 0) == 0) {
            const std::string name = r.name.substr(8);
            m_[name].assign(r.tensor.data().begin(), r.tensor.data().end());
            order_.push_back(name);
        } else if (r.name.rfind("optim.v.", 0) == 0) {
            v_[r.name.substr(8)].assign(r.tensor.data().begin(), r.tensor.data().end());
        }
    }
    for (const auto& n : order_)
        WAVER_REQUIRE(v_.count(n) && v_[n].size() == m_[n].size(), ContractError,
                      "optimizer state for '" + n + "' is incomplete");
}

// ---- data ------------------------------------------------------------------

SpriteDataset::SpriteDataset(const DataConfig& cfg) {
    const bool filter = cfg.min_motion > 0.0 || cfg.max_motion < 1e9;
    const std::size_t want = std::size_t(cfg.pool_size), max_attempts = want * 50;
    std::size_t attempt = 0;
    while (items_.size() < want) {
        WAVER_REQUIRE(attempt < max_attempts, ContractError, "motion filter rejected too many candidate videos");
        const std::size_t i = items_.size();
        const bool image = std::floor(double(i + 1) * cfg.image_fraction) > std::floor(double(i) * cfg.image_fraction);
        PoolItem item;
        item.seed = derive_seed(cfg.seed, {attempt++});
        item.image = image || cfg.frames == 1;
        item.video = sprite_video_from_seed(item.seed, item.image ? 1 : cfg.frames, cfg.height, cfg.width);
        if (filter && !item.image) {
            const double fg = motion_score(item.video.video, kDefaultFgThreshold).fg;
            if (fg < cfg.min_motion || fg > cfg.max_motion) {
                ++rejected_;
                continue;
            }
        }
        items_.push_back(std::move(item));
    }
}

double SpriteDataset::mean_motion() const {
    double s = 0.0;
    int n = 0;
    for (const auto& it : items_)
        if (!it.image) {
            s += motion_score(it.video.video, kDefaultFgThreshold).fg;
            ++n;
        }
    return n ? s / n : 0.0;
}

int token_length(const PoolItem& item, const RunConfig& cfg) {
    const auto& v = item.video.video;
    const int grid = patch_grid(v.frames(), v.height(), v.width(), cfg.model.patch).volume();
    if (cfg.stage == Stage::Refiner) return grid;
    return grid + int(prompt_tokens(item.video.style_tag, item.video.caption).size());
}

TensorList model_parameters(const HybridDiT& model) { return model.params().snapshot(); }

void load_model_parameters(HybridDiT& model, const TensorList& records) {
    TensorList vals = model.params().snapshot();
    for (auto& v : vals) v.tensor = find_tensor(records, v.name);
    model.params().load(vals);
}

// ---- trainer ---------------------------------------------------------------

Trainer::Trainer(RunConfig cfg) : cfg_(std::move(cfg)), optim_(cfg_.optim) {
    cfg_.validate();
    model_ = std::make_unique<HybridDiT>(cfg_.model, cfg_.seed);
    data_ = std::make_unique<SpriteDataset>(cfg_.data);
    if (cfg_.align.enabled) {
        WAVER_REQUIRE(cfg_.stage != Stage::Refiner, ContractError, "alignment is not defined for the refiner stage");
        WAVER_REQUIRE(cfg_.align.tap_layer < cfg_.model.layers(), ContractError, "align.tap_layer beyond model depth");
        projector_ = std::make_unique<AlignmentProjector>(cfg_.model.d_model, 0, cfg_.align.teacher_dim,
                                                          derive_seed(cfg_.seed, {kProjectorStream}));
        teacher_ = make_teacher(3, teacher_block(cfg_.align, cfg_.model.patch), cfg_.align.teacher_dim,
                                cfg_.align.teacher_seed);
    }
    for (std::size_t i = 0; i < data_->size(); ++i) {
        const int len = token_length(data_->item(i), cfg_);
        WAVER_REQUIRE(len <= cfg_.data.pack_tokens, ContractError,
                      "sample of " + std::to_string(len) + " tokens exceeds data.pack_tokens " +
                          std::to_string(cfg_.data.pack_tokens));
        lengths_.push_back(len);
    }
    plan_ = spfhp_pack(lengths_, cfg_.data.pack_tokens, cfg_.data.max_per_bin);
    Rng probe(0);
    batches_per_epoch_ = bucket_batches(plan_, cfg_.data.bucket_edges.empty() ? std::vector<int>{cfg_.data.pack_tokens}
                                                                              : cfg_.data.bucket_edges,
                                        cfg_.optim.batch_size, probe)
                             .size();
}

Trainer::~Trainer() = default;

std::vector<ParamStore*> Trainer::stores() {
    std::vector<ParamStore*> s{&model_->params()};
    if (projector_) s.push_back(&projector_->params());
    return s;
}

std::vector<std::vector<std::size_t>> Trainer::batch_for_step(int step) const {
    const int epoch = int(std::size_t(step) / batches_per_epoch_);
    if (epoch != cached_epoch_) {
        Rng er(derive_seed(cfg_.seed, {kEpochStream, std::uint64_t(epoch)}));
        const auto edges =
            cfg_.data.bucket_edges.empty() ? std::vector<int>{cfg_.data.pack_tokens} : cfg_.data.bucket_edges;
        cached_batches_ = bucket_batches(plan_, edges, cfg_.optim.batch_size, er);
        cached_epoch_ = epoch;
    }
    const auto& batch = cached_batches_[std::size_t(step) % batches_per_epoch_];
    std::vector<std::vector<std::size_t>> out;
    for (auto b : batch.bins) out.push_back(plan_.bins[b]);
    return out;
}

PreparedSample Trainer::prepare(int step, std::size_t pool_id) const {
    const auto& item = data_->item(pool_id);
    Rng r(derive_seed(cfg_.seed, {std::uint64_t(step), std::uint64_t(pool_id)}));
    const Tensor& x0 = item.video.video.data;
    PreparedSample ps;
    ps.pool_id = pool_id;
    if (cfg_.stage == Stage::Refiner) {
        const auto pair = refiner_pair(x0, r, cfg_.degrade, [&](Rng& rr) { return sample_timestep(cfg_.timesteps, rr); });
        ps.input = {pair.x_input, {}, pair.w};
        ps.target = pair.x_target;
        return ps;
    }
    const double u_kind = r.uniform(), u_drop = r.uniform();
    ps.kind = item.image ? TaskKind::T2I : (u_kind < cfg_.data.p_i2v ? TaskKind::I2V : TaskKind::T2V);
    std::vector<int> text;
    if (u_drop >= cfg_.data.p_uncond) text = prompt_tokens(item.video.style_tag, item.video.caption);
    const double t = sample_timestep(cfg_.timesteps, r);
    TaskSample task = make_task_sample(ps.kind, item.video.video, item.video.caption, item.video.style_tag);
    const auto pair = fm_pair(x0, t, r);
    Tensor xt = pair.x_t.clone();
    impose_condition_frames(xt, task);
    ps.input = {build_unified_input(task, LatentVideo(xt)), text, t};
    ps.target = pair.target;
    ps.cond_mask.assign(std::size_t(item.video.video.frames()), false);
    for (int f : task.cond_frames) ps.cond_mask[std::size_t(f)] = true;
    if (teacher_ && !item.image) {
        const Dim3 g = patch_grid(item.video.video.frames(), item.video.video.height(), item.video.video.width(),
                                  cfg_.model.patch);
        if (g.t % cfg_.align.temporal_ds == 0 && g.h % cfg_.align.spatial_ds == 0 && g.w % cfg_.align.spatial_ds == 0) {
            ps.aligned = true;
            ps.teacher = teacher_features(x0, *teacher_);
        }
    }
    return ps;
}

std::vector<std::vector<PreparedSample>> Trainer::prepare_step(int step) const {
    std::vector<std::vector<PreparedSample>> bins;
    for (const auto& ids : batch_for_step(step)) {
        std::vector<PreparedSample> bin;
        for (auto id : ids) bin.push_back(prepare(step, id));
        bins.push_back(std::move(bin));
    }
    return bins;
}

std::pair<Tensor, Tensor> Trainer::batch_loss(const std::vector<std::vector<PreparedSample>>& bins) const {
    Tensor fm, al;
    int n = 0, n_al = 0;
    ForwardOptions opt;
    if (projector_) opt.tap_layer = cfg_.align.tap_layer;
    for (const auto& bin : bins) {
        std::vector<DiTSample> batch;
        for (const auto& s : bin) batch.push_back(s.input);
        const auto res = model_->forward(batch, opt);
        for (std::size_t i = 0; i < bin.size(); ++i) {
            const Tensor l = fm_loss(res.velocity[i], bin[i].target, bin[i].cond_mask);
            fm = fm.defined() ? fm + l : l;
            ++n;
            if (projector_ && bin[i].aligned) {
                const auto& x = bin[i].input.x;
                const Dim3 g = patch_grid(int(x.dim(1)), int(x.dim(2)), int(x.dim(3)), cfg_.model.patch);
                const Tensor a = alignment_loss(res.tapped[i], g, bin[i].teacher, *projector_, cfg_.align);
                al = al.defined() ? al + a : a;
                ++n_al;
            }
        }
    }
    WAVER_REQUIRE(n > 0, ContractError, "empty training batch");
    fm = fm * (1.0 / n);
    al = n_al ? al * (1.0 / n_al) : Tensor::scalar(0.0);
    return {fm, al};
}

StepMetrics Trainer::run_step(const std::vector<std::vector<PreparedSample>>& bins) {
    for (auto* s : stores()) s->zero_grad();
    const auto [fm, al] = batch_loss(bins);
    const Tensor loss = projector_ ? train_loss(fm, al, cfg_.align.lambda) : fm;
    StepMetrics m;
    m.step = step_;
    m.fm_loss = fm.item();
    m.align_loss = al.item();
    m.lr = cfg_.optim.lr_at(step_);
    for (const auto& bin : bins)
        for (const auto& s : bin) {
            ++m.samples;
            m.tokens += lengths_[s.pool_id];
            m.timesteps.push_back(s.input.t);
        }
    auto fail = [&](const std::string& what) {
        if (!failure_path_.empty()) save(failure_path_);
        throw NumericDivergence(what + " at training step " + std::to_string(step_), step_);
    };
    if (!std::isfinite(loss.item())) fail("non-finite loss");
    loss.backward();
    if (!std::isfinite(global_grad_norm(stores()))) fail("non-finite gradient");
    m.grad_norm = optim_.step(stores(), m.lr);
    ++step_;
    return m;
}

StepMetrics Trainer::train_step() { return run_step(prepare_step(step_)); }

std::vector<StepMetrics> Trainer::train(int steps, const std::function<void(const StepMetrics&)>& on_step) {
    std::vector<StepMetrics> out;
    if (cfg_.data.prefetch > 0) {
        int next = step_;
        const int end = step_ + steps;
        Prefetcher<std::vector<std::vector<PreparedSample>>> pf(
            [&, this]() -> std::optional<std::vector<std::vector<PreparedSample>>> {
                if (next >= end) return std::nullopt;
                return prepare_step(next++);
            },
            std::size_t(cfg_.data.prefetch));
        while (auto bins = pf.next()) {
            out.push_back(run_step(*bins));
            if (on_step) on_step(out.back());
        }
        return out;
    }
    for (int i = 0; i < steps; ++i) {
        out.push_back(train_step());
        if (on_step) on_step(out.back());
    }
    return out;
}

TensorList Trainer::state() const {
    TensorList out = model_->params().snapshot();
    if (projector_)
        for (auto& r : projector_->params().snapshot()) out.push_back(std::move(r));
    for (auto& r : optim_.state()) out.push_back(std::move(r));
    out.push_back({"trainer.step", Tensor::scalar(double(step_))});
    out.push_back({"trainer.config_hash", Tensor::scalar(double(cfg_.hash() >> 11))});
    return out;
}

void Trainer::load_state(const TensorList& records) {
    load_model_parameters(*model_, records);
    if (projector_) {
        TensorList vals = projector_->params().snapshot();
        for (auto& v : vals) v.tensor = find_tensor(records, v.name);
        projector_->params().load(vals);
    }
    optim_.load_state(records);
    step_ = int(find_tensor(records, "trainer.step").item());
}

void Trainer::save(const std::filesystem::path& path) const { save_checkpoint(path, state()); }

void Trainer::load(const std::filesystem::path& path) { load_state(load_checkpoint(path)); }

void Trainer::init_model_from(const TensorList& records) { load_model_parameters(*model_, records); }

}  // namespace waver
