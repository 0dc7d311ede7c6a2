#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyssm/polyops.hpp"
#include "polyssm/sscan.hpp"

// Patch-token forecaster: shared patch embedding, a residual stack of
// selective-SSM blocks with the poly state transform, and a flatten +
// linear head.
namespace polyssm::model {

struct PatchConfig {
    std::size_t patch_len = 16;
    std::size_t stride = 8;
    std::size_t lookback = 96;

    /// floor((lookback - patch_len) / stride) + 1; throws on invalid settings.
    std::size_t tokens() const;
    void validate() const;
};

struct ModelConfig {
    std::size_t channels = 7;
    std::size_t d_model = 16;
    std::size_t d_inner = 32;
    std::size_t state = 8;
    std::size_t layers = 2;
    std::size_t horizon = 96;
    std::size_t conv_width = 4;
    double dropout = 0.1;
    bool instance_norm = true;
    polyops::Variant variant = polyops::Variant::full;
    PatchConfig patch;

    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <class T>
struct BlockParams {
    BlockParams(const ModelConfig& cfg, std::mt19937_64& rng);

    Parameter<T> norm_w;   // [D]
    Parameter<T> in_w;     // [D, 2 Di]
    Parameter<T> conv_w;   // [Di, K]
    Parameter<T> conv_b;   // [Di]
    sscan::SelectiveParams<T> ssm;
    polyops::PolyParams<T> poly;
    Parameter<T> out_w;    // [Di, D]

    std::vector<std::pair<std::string, Parameter<T>*>> named_parameters();
};

struct ForwardOptions {
    sscan::ScanMode mode = sscan::ScanMode::parallel;
    unsigned threads = 1;
    bool training = false;
    std::mt19937_64* rng = nullptr;  // required for dropout when training
    /// When set, each block appends its pre-transform states [B, C, L_tok, Di, N].
    std::vector<Tensor<double>>* states = nullptr;
};

/// Unfolds series[B, C, lookback] into patches[B, C, L_tok, patch_len].
template <class T>
Tensor<T> unfold_patches(const Tensor<T>& series, const PatchConfig& cfg);

/// tokens[B, C, L_tok, D] = patches W_embed + b_embed.
template <class T>
Var<T> patch_embed(Graph<T>& g, const Tensor<T>& series, const PatchConfig& cfg, Parameter<T>& w,
                   Parameter<T>& b);

/// One residual block on tokens[B, C, L_tok, D].
template <class T>
Var<T> block_forward(Graph<T>& g, Var<T> tokens, BlockParams<T>& bp, const ModelConfig& cfg,
                     const ForwardOptions& opts);

template <class T>
class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& config() { return cfg_; }

    /// The block stack on tokens[B, C, L_tok, D].
    Var<T> encode(Graph<T>& g, Var<T> tokens, const ForwardOptions& opts);

    /// series[B, C, lookback] -> prediction[B, C, horizon].
    Var<T> forward(Graph<T>& g, const Tensor<T>& series, const ForwardOptions& opts);

    /// Grad-free forward.
    Tensor<T> predict(const Tensor<T>& series, const ForwardOptions& opts = {});

    std::vector<std::pair<std::string, Parameter<T>*>> named_parameters();
    std::vector<Parameter<T>*> parameters();
    std::size_t parameter_count();

    Parameter<T> embed_w;  // [patch_len, D]
    Parameter<T> embed_b;  // [D]
    std::vector<std::unique_ptr<BlockParams<T>>> blocks;
    Parameter<T> norm_f;   // [D]
    Parameter<T> head_w;   // [L_tok * D, H]
    Parameter<T> head_b;   // [H]

private:
    ModelConfig cfg_;
};

/// Per-(batch, channel) mean and std over the last axis.
template <class T>
struct InstanceStats {
    Tensor<T> mean;  // [B, C]
    Tensor<T> std;   // [B, C]
};

template <class T>
InstanceStats<T> instance_stats(const Tensor<T>& series, T eps = T(1e-5));

// Checkpoint container; layout documented in docs/checkpoint.md.
inline constexpr char kCheckpointMagic[8] = {'P', 'S', 'S', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    DType dtype = DType::f64;
    Shape shape;
    std::vector<double> values;
};

struct CheckpointFile {
    nlohmann::json header;  // {"model": ModelConfig, ...extra}
    std::vector<NamedArray> arrays;
};

void write_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::string& path);

template <class T>
void save_model(const std::string& path, Model<T>& model, const nlohmann::json& extra = nlohmann::json::object());

/// Restores a model; `extra` receives the header minus the model config.
template <class T>
Model<T> load_model(const std::string& path, nlohmann::json* extra = nullptr);

}  // namespace polyssm::model
