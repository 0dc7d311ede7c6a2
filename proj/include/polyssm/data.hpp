#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyssm/tensor.hpp"

// Series ingestion, train/val/test protocol, windowing, and the synthetic
// generator with time-varying channel coupling.
namespace polyssm::data {

/// Malformed input data or a violated data precondition.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SeriesTable {
    std::vector<std::string> timestamps;
    Tensor<double> values;  // [T, C]
    std::vector<std::string> channel_names;

    std::size_t rows() const { return timestamps.size(); }
    std::size_t channels() const { return channel_names.size(); }
};

/// Seconds since 1970-01-01 for "YYYY-MM-DD[ T]HH:MM[:SS]" or "YYYY-MM-DD".
std::int64_t parse_timestamp(const std::string& s);
std::string format_timestamp(std::int64_t seconds);

SeriesTable load_csv(const std::string& path);
void write_csv(const SeriesTable& table, const std::string& path);

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& name);

/// Either fractional ratios or fixed row counts per split (ETT convention).
struct SplitOptions {
    double train_ratio = 0.7;
    double test_ratio = 0.2;
    std::optional<std::array<std::size_t, 3>> fixed_rows;  // train, val, test
};

struct SplitSpec {
    std::array<std::size_t, 3> border1{};  // first row of each segment, context included
    std::array<std::size_t, 3> border2{};  // one past the last row
    std::vector<double> mean;              // per channel, train rows
    std::vector<double> std;               // per channel, train rows, ddof 0
    std::size_t lookback = 0;
    std::size_t horizon = 0;

    std::size_t windows(Split s) const;
    /// First row any target of split `s` may occupy.
    std::size_t target_start(Split s) const;
};

/// (b2 - b1) - lookback - horizon + 1, or 0 when the segment is too short.
std::size_t count_windows(std::size_t b1, std::size_t b2, std::size_t lookback, std::size_t horizon);

SplitSpec make_splits(const SeriesTable& table, const SplitOptions& options, std::size_t lookback,
                      std::size_t horizon);

/// Z-scored values ready for windowing.
class ForecastTask {
public:
    ForecastTask(const SeriesTable& table, const SplitOptions& options, std::size_t lookback, std::size_t horizon);
    /// Reuses stored statistics (e.g. from a checkpoint) instead of recomputing them.
    ForecastTask(const SeriesTable& table, SplitSpec spec);

    const SplitSpec& spec() const { return spec_; }
    std::size_t channels() const { return channels_; }
    std::size_t windows(Split s) const { return spec_.windows(s); }
    const Tensor<double>& normalized() const { return norm_; }

    /// Row of the first lookback step of window i.
    std::size_t origin(Split s, std::size_t i) const;

    /// x[C, lookback], y[C, horizon] on the normalized scale.
    void window(Split s, std::size_t i, Tensor<double>& x, Tensor<double>& y) const;

    /// Stacks windows into X[B, C, lookback] and Y[B, C, horizon].
    template <class T>
    void batch(Split s, const std::vector<std::size_t>& indices, Tensor<T>& x, Tensor<T>& y) const;

private:
    SplitSpec spec_;
    std::size_t channels_ = 0;
    std::size_t rows_ = 0;
    Tensor<double> norm_;  // [T, C]
};

/// values[T, C] -> (values - mean) / std per channel, and back.
Tensor<double> normalize(const Tensor<double>& values, const SplitSpec& spec);
Tensor<double> denormalize(const Tensor<double>& values, const SplitSpec& spec);

enum class Regime { linear, polynomial, switching };
std::string to_string(Regime r);
Regime parse_regime(const std::string& name);

struct SynthOptions {
    std::size_t length = 20000;
    std::size_t channels = 8;
    std::uint64_t seed = 7;
    Regime regime = Regime::switching;
    std::size_t switch_interval = 1000;
    std::optional<double> alpha;    // constant coupling override
    std::optional<std::size_t> tau; // constant lag override
    bool noise = true;
};

struct SynthResult {
    SeriesTable table;
    nlohmann::json meta;
};

SynthResult synth_cdt(const SynthOptions& options);

}  // namespace polyssm::data
