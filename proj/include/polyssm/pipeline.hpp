#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyssm/data.hpp"
#include "polyssm/model.hpp"

// Training, evaluation, the ablation grid and the command-line front end.
namespace polyssm::pipeline {

/// Bad configuration or command-line usage.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Flat "section.key" -> value map read from a nested key-value file.
/// Accepts `[section]` headers followed by `key = value` lines, dotted
/// `section.key = value` lines, and `#` or `;` comments.
using ConfigMap = std::map<std::string, std::string>;
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);

struct TrainConfig {
    double lr = 1e-4;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t patience = 3;
    std::uint64_t seed = 0;
    DType precision = DType::f32;
    sscan::ScanMode scan = sscan::ScanMode::parallel;
    unsigned threads = 1;
    /// Use every k-th training window (1 = all).
    std::size_t train_stride = 1;
    /// Cap on optimizer steps per epoch (0 = no cap).
    std::size_t max_batches = 0;
    /// Use every k-th validation window during early stopping (1 = all).
    std::size_t val_stride = 1;
    double grad_clip = 0.0;
    bool log_wall_time = false;

    void validate() const;
};

struct DataConfig {
    std::string path;
    std::size_t lookback = 96;
    std::size_t horizon = 96;
    data::SplitOptions split;
};

struct RunConfig {
    model::ModelConfig model;
    DataConfig data;
    TrainConfig train;
};

/// Applies recognised keys; unknown keys raise UsageError.
void apply_config(RunConfig& cfg, const ConfigMap& map);
/// Copies lookback/horizon into the model config and validates everything.
void finalize(RunConfig& cfg);

nlohmann::json to_json(const TrainConfig& t);

struct MetricsRecord {
    std::string split;
    std::size_t horizon = 0;
    double mse = 0.0;
    double mae = 0.0;
    std::size_t epoch = 0;
    double wall_ms = 0.0;

    nlohmann::json json(bool with_wall_time) const;
};

struct Metrics {
    double mse = 0.0;
    double mae = 0.0;
};

/// Mean squared and absolute error over all elements.
template <class T>
Metrics compute_metrics(const Tensor<T>& pred, const Tensor<T>& target);

/// Adam with bias correction.
template <class T>
class Adam {
public:
    Adam(std::vector<Parameter<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step();
    void zero_grad();
    std::size_t steps() const { return t_; }

private:
    std::vector<Parameter<T>*> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

template <class T>
Metrics evaluate_split(model::Model<T>& m, const data::ForecastTask& task, data::Split split,
                       const model::ForwardOptions& opts, std::size_t batch_size = 64, std::size_t stride = 1);

template <class T>
MetricsRecord evaluate(model::Model<T>& m, const data::ForecastTask& task, data::Split split,
                       const model::ForwardOptions& opts, std::size_t batch_size = 64);

struct TrainResult {
    std::vector<MetricsRecord> history;  // train and val per epoch, then test
    std::size_t best_epoch = 0;
    double best_val_mse = 0.0;
    MetricsRecord test;
};

/// Trains in place; the best-on-validation parameters are restored at the
/// end. `on_record` sees each record as it is produced.
template <class T>
TrainResult train(model::Model<T>& m, const data::ForecastTask& task, const TrainConfig& cfg,
                  const std::function<void(const MetricsRecord&)>& on_record = {});

struct AblationRow {
    polyops::Variant variant;
    std::size_t horizon;
    std::uint64_t seed;
    double mse;
    double mae;
};

struct AblationSummary {
    polyops::Variant variant;
    std::size_t horizon;
    std::size_t seeds;
    double mse;
    double mae;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationSummary> summary;  // 5 rows per horizon
};

AblationResult ablate(const data::SeriesTable& table, const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                      const std::vector<std::size_t>& horizons, std::ostream* progress = nullptr);

void write_ablation_csv(const AblationResult& r, std::ostream& rows, std::ostream& summary);

/// Full command line; returns the process exit code
/// (0 ok, 1 usage, 2 data, 3 numeric).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace polyssm::pipeline
