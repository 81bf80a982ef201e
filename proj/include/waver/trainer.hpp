#pragma once

// Training loop: synthetic sprite pool, SPFHP-packed bucketed batches,
// rectified-flow (or refiner) targets, optional representation alignment and
// AdamW. Every random draw is derived from (seed, step, sample id), so a run
// resumed from a checkpoint reproduces the uninterrupted run bit-exactly.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "waver/checkpoint.hpp"
#include "waver/config.hpp"
#include "waver/hybrid_dit.hpp"
#include "waver/objectives.hpp"
#include "waver/packing.hpp"
#include "waver/params.hpp"
#include "waver/task_io.hpp"

namespace waver {

class AdamW {
public:
    explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

    // Clips the global gradient norm (if configured), then applies one
    // decoupled-weight-decay Adam update to every parameter with a gradient.
    // Returns the pre-clip gradient norm.
    double step(const std::vector<ParamStore*>& stores, double lr);

    long steps_taken() const { return t_; }
    TensorList state() const;  // "optim.t", "optim.m.<name>", "optim.v.<name>"
    void load_state(const TensorList& records);

private:
    OptimConfig cfg_;
    long t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
    std::vector<std::string> order_;
};

double global_grad_norm(const std::vector<ParamStore*>& stores);

struct PoolItem {
    std::uint64_t seed = 0;
    bool image = false;
    SpriteVideo video;
};

class SpriteDataset {
public:
    explicit SpriteDataset(const DataConfig& cfg);
    std::size_t size() const { return items_.size(); }
    const PoolItem& item(std::size_t i) const { return items_.at(i); }
    // Mean foreground motion score over the video items.
    double mean_motion() const;
    std::size_t rejected() const { return rejected_; }

private:
    std::vector<PoolItem> items_;
    std::size_t rejected_ = 0;
};

// One ready-to-run training example.
struct PreparedSample {
    std::size_t pool_id = 0;
    DiTSample input;
    Tensor target;
    std::vector<bool> cond_mask;
    TaskKind kind = TaskKind::T2V;
    bool aligned = false;
    Tensor teacher;  // teacher features when aligned
};

struct StepMetrics {
    int step = 0;
    double fm_loss = 0.0;
    double align_loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    int samples = 0;
    std::size_t tokens = 0;
    std::vector<double> timesteps;
};

class Trainer {
public:
    explicit Trainer(RunConfig cfg);
    ~Trainer();

    const RunConfig& config() const { return cfg_; }
    HybridDiT& model() { return *model_; }
    const HybridDiT& model() const { return *model_; }
    const SpriteDataset& dataset() const { return *data_; }
    const PackPlan& pack_plan() const { return plan_; }
    const std::vector<int>& token_lengths() const { return lengths_; }
    int step_index() const { return step_; }
    std::size_t batches_per_epoch() const { return batches_per_epoch_; }

    // Pool ids of each packed bin used at a step.
    std::vector<std::vector<std::size_t>> batch_for_step(int step) const;
    PreparedSample prepare(int step, std::size_t pool_id) const;
    std::vector<std::vector<PreparedSample>> prepare_step(int step) const;

    // Loss of one step's batch without touching the optimizer.
    std::pair<Tensor, Tensor> batch_loss(const std::vector<std::vector<PreparedSample>>& bins) const;

    StepMetrics train_step();
    std::vector<StepMetrics> train(int steps, const std::function<void(const StepMetrics&)>& on_step = {});

    // Parameters, projector, optimizer moments and step counter.
    TensorList state() const;
    void load_state(const TensorList& records);
    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);
    // Copies matching model parameters (e.g. from an earlier stage).
    void init_model_from(const TensorList& records);
    // Where the last good state is written when a step diverges.
    void set_failure_path(std::filesystem::path p) { failure_path_ = std::move(p); }

    const AlignmentProjector* projector() const { return projector_.get(); }

private:
    std::vector<ParamStore*> stores();
    StepMetrics run_step(const std::vector<std::vector<PreparedSample>>& bins);

    RunConfig cfg_;
    std::unique_ptr<HybridDiT> model_;
    std::unique_ptr<SpriteDataset> data_;
    std::unique_ptr<AlignmentProjector> projector_;
    std::optional<TeacherProjection> teacher_;
    AdamW optim_;
    std::vector<int> lengths_;
    PackPlan plan_;
    std::size_t batches_per_epoch_ = 0;
    mutable int cached_epoch_ = -1;
    mutable std::vector<Batch> cached_batches_;
    int step_ = 0;
    std::filesystem::path failure_path_;
};

// Token length of a pool item under a model config: video grid + prompt.
int token_length(const PoolItem& item, const RunConfig& cfg);

// Model parameters only.
TensorList model_parameters(const HybridDiT& model);
// Loads the records whose names match model parameters; all must be present.
void load_model_parameters(HybridDiT& model, const TensorList& records);

}  // namespace waver
