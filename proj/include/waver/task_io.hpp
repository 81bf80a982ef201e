#pragma once

// Unified conditioning input for text-to-image, text-to-video and
// image-to-video, plus the synthetic moving-sprite data source and the
// frame-difference motion score.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "waver/rng.hpp"
#include "waver/tensor.hpp"

namespace waver {

// [C, T, H, W]; T == 1 is an image.
struct LatentVideo {
    Tensor data;

    LatentVideo() = default;
    explicit LatentVideo(Tensor t);
    static LatentVideo zeros(int c, int t, int h, int w);

    int channels() const { return static_cast<int>(data.dim(0)); }
    int frames() const { return static_cast<int>(data.dim(1)); }
    int height() const { return static_cast<int>(data.dim(2)); }
    int width() const { return static_cast<int>(data.dim(3)); }
    std::size_t index(int c, int t, int h, int w) const {
        return ((static_cast<std::size_t>(c) * frames() + t) * height() + h) * width() + w;
    }
    double at(int c, int t, int h, int w) const { return data.data()[index(c, t, h, w)]; }
    Tensor frame(int t) const;  // [C, 1, H, W]
};

enum class TaskKind { T2I, T2V, I2V };
std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSample {
    TaskKind kind = TaskKind::T2V;
    LatentVideo latent;  // clean x0
    std::vector<int> cond_frames;
    std::vector<int> caption_tokens;
    int style_tag = 0;

    void validate() const;
};

// Builds a sample of the given kind, filling cond_frames from the kind.
TaskSample make_task_sample(TaskKind kind, LatentVideo latent, std::vector<int> caption, int style_tag);

// [2C+1, T, H, W]: noisy latent, condition latents (zero on non-condition
// frames), binary per-frame mask.
Tensor build_unified_input(const TaskSample& sample, const LatentVideo& noisy);

TaskKind sample_task(Rng& rng, double p_i2v);

// ---- synthetic sprite data ------------------------------------------------

namespace vocab {
inline constexpr int kNull = 0;
inline constexpr int kNumStyles = 4;
inline constexpr int kNumCounts = 2;  // 1 or 2 sprites
inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 6;
inline constexpr int kNumDirections = 8;
inline constexpr int kNumSpeeds = 4;
inline constexpr int kStyleBase = 1;
inline constexpr int kCountBase = kStyleBase + kNumStyles;
inline constexpr int kShapeBase = kCountBase + kNumCounts;
inline constexpr int kColorBase = kShapeBase + kNumShapes;
inline constexpr int kDirectionBase = kColorBase + kNumColors;
inline constexpr int kSpeedBase = kDirectionBase + kNumDirections;
inline constexpr int kSize = 32;
static_assert(kSpeedBase + kNumSpeeds <= kSize);

inline int style_token(int style) { return kStyleBase + style; }
}  // namespace vocab

enum class Style { Clean = 0, Grainy = 1, Dim = 2, Blurry = 3 };

enum class Shape2D { Square = 0, Circle = 1, Diamond = 2, Cross = 3 };

// Geometry lives in a canonical 16x16 unit frame and is scaled to the render
// resolution, so the same scene renders consistently at any size.
inline constexpr double kCanonicalExtent = 16.0;

struct SpriteParams {
    int shape = 0;
    int color = 0;
    int direction = 0;  // 0 = +x, counter-clockwise in 45 degree steps (y grows downward)
    int speed = 0;      // bucket
    double x = 8.0, y = 8.0;  // centre at frame 0
    double radius = 2.5;
    double vx = 0.0, vy = 0.0;  // units per frame
};

struct SpriteScene {
    int style = 0;
    std::vector<SpriteParams> sprites;
    std::uint64_t grain_seed = 0;
};

double speed_units(int bucket);
void direction_vector(int direction, double& dx, double& dy);
const std::vector<std::vector<double>>& sprite_palette();

SpriteScene random_scene(Rng& rng, int frames);
// Velocity from the discrete direction/speed labels.
void assign_velocity(SpriteParams& s);

LatentVideo render_scene(const SpriteScene& scene, int frames, int height, int width);

// Caption without the style prefix: count token then (shape, color, direction, speed) per sprite.
std::vector<int> encode_caption(const SpriteScene& scene);

struct CaptionLabels {
    struct Sprite {
        int shape, color, direction, speed;
        bool operator==(const Sprite&) const = default;
    };
    std::vector<Sprite> sprites;
};
CaptionLabels decode_caption(const std::vector<int>& tokens);

// Mean per-frame displacement in pixels at the given resolution, averaged over sprites.
double scene_motion(const SpriteScene& scene, int height, int width);

struct SpriteVideo {
    LatentVideo video;
    std::vector<int> caption;
    int style_tag = 0;
    double motion = 0.0;
    SpriteScene scene;
};

SpriteVideo generate_sprite_video(Rng& rng, int frames, int height, int width);
SpriteVideo sprite_video_from_seed(std::uint64_t seed, int frames, int height, int width);

// Conditioning tokens seen by the model: style tag followed by the caption.
std::vector<int> prompt_tokens(int style_tag, const std::vector<int>& caption);

// ---- motion scoring -------------------------------------------------------

struct MotionScore {
    double fg = 0.0;
    double bg = 0.0;
};

// Foreground = pixels whose channel-averaged temporal variance exceeds
// fg_threshold. Each score is the summed absolute inter-frame difference over
// its region divided by the summed spatial gradient magnitude there (normal
// flow), so it reads roughly as pixels moved per frame.
MotionScore motion_score(const LatentVideo& video, double fg_threshold);

inline constexpr double kDefaultFgThreshold = 0.02;

std::vector<TaskSample> filter_by_motion(const std::vector<TaskSample>& samples, double min_fg, double max_fg,
                                         double fg_threshold = kDefaultFgThreshold);

// ---- dataset manifest -----------------------------------------------------

struct DatasetRecord {
    std::uint64_t seed = 0;
    TaskKind kind = TaskKind::T2V;
    double motion = 0.0;
    std::vector<int> tokens;
    bool operator==(const DatasetRecord&) const = default;
};

void write_manifest(std::ostream& os, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_manifest(std::istream& is);

}  // namespace waver
