#include "polyssm/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace polyssm::data {

namespace {

// Howard Hinnant's civil-calendar conversions.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = unsigned(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + std::int64_t(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = unsigned(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = std::int64_t(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y += m <= 2;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n\"");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n\"");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

std::int64_t parse_timestamp(const std::string& s) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    char sep = ' ';
    int n = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &sec);
    if (n < 3 || (n > 3 && sep != ' ' && sep != 'T') || n == 4 || n == 5) {
        throw DataError("unparseable timestamp '" + s + "'");
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || sec < 0 || sec > 60) {
        throw DataError("timestamp out of range '" + s + "'");
    }
    return days_from_civil(y, unsigned(mo), unsigned(d)) * 86400 + h * 3600 + mi * 60 + sec;
}

std::string format_timestamp(std::int64_t seconds) {
    std::int64_t days = seconds / 86400;
    std::int64_t rem = seconds % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    std::int64_t y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02u %02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

SeriesTable load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || trim(line).empty()) throw DataError(path + ": no data rows (empty file)");
    const std::vector<std::string> header = split_line(line);
    if (header.empty() || header[0] != "date") {
        throw DataError(path + ": first column must be named 'date'");
    }
    if (header.size() < 2) throw DataError(path + ": no value columns");
    SeriesTable t;
    t.channel_names.assign(header.begin() + 1, header.end());
    const std::size_t C = t.channel_names.size();
    std::vector<double> values;
    std::int64_t prev = 0;
    std::size_t row = 0;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        ++row;
        const std::string where = path + ": row " + std::to_string(row) + " (line " + std::to_string(lineno) + ")";
        const std::vector<std::string> cells = split_line(line);
        if (cells.size() != header.size()) {
            throw DataError(where + ": expected " + std::to_string(header.size()) + " cells, found " +
                            std::to_string(cells.size()) + " (missing value)");
        }
        std::int64_t ts;
        try {
            ts = parse_timestamp(cells[0]);
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        if (row > 1 && ts <= prev) {
            throw DataError(where + ": timestamp '" + cells[0] + "' is not after the previous row");
        }
        prev = ts;
        t.timestamps.push_back(cells[0]);
        for (std::size_t c = 0; c < C; ++c) {
            const std::string& cell = cells[c + 1];
            if (cell.empty()) throw DataError(where + ": missing value in column '" + t.channel_names[c] + "'");
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end != cell.c_str() + cell.size()) {
                throw DataError(where + ": non-numeric value '" + cell + "' in column '" + t.channel_names[c] + "'");
            }
            if (!std::isfinite(v)) {
                throw DataError(where + ": missing value '" + cell + "' in column '" + t.channel_names[c] + "'");
            }
            values.push_back(v);
        }
    }
    if (row == 0) throw DataError(path + ": no data rows");
    t.values = Tensor<double>({row, C}, std::move(values));
    return t;
}

void write_csv(const SeriesTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << "date";
    for (const auto& n : table.channel_names) out << ',' << n;
    out << '\n';
    out << std::setprecision(17);
    const std::size_t C = table.channels();
    for (std::size_t r = 0; r < table.rows(); ++r) {
        out << table.timestamps[r];
        for (std::size_t c = 0; c < C; ++c) out << ',' << table.values[r * C + c];
        out << '\n';
    }
    if (!out) throw DataError("failed writing " + path);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val" || name == "vali" || name == "validation") return Split::val;
    if (name == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::size_t count_windows(std::size_t b1, std::size_t b2, std::size_t lookback, std::size_t horizon) {
    if (b2 < b1 || b2 - b1 < lookback + horizon) return 0;
    return (b2 - b1) - lookback - horizon + 1;
}

std::size_t SplitSpec::windows(Split s) const {
    const auto i = std::size_t(s);
    return count_windows(border1[i], border2[i], lookback, horizon);
}

std::size_t SplitSpec::target_start(Split s) const { return border1[std::size_t(s)] + lookback; }

SplitSpec make_splits(const SeriesTable& table, const SplitOptions& options, std::size_t lookback,
                      std::size_t horizon) {
    if (lookback == 0 || horizon == 0) throw DataError("lookback and horizon must be positive");
    const std::size_t T = table.rows();
    std::size_t n_train, n_val, n_test;
    if (options.fixed_rows) {
        n_train = (*options.fixed_rows)[0];
        n_val = (*options.fixed_rows)[1];
        n_test = (*options.fixed_rows)[2];
        if (n_train + n_val + n_test > T) {
            throw DataError("fixed split boundaries need " + std::to_string(n_train + n_val + n_test) +
                            " rows, table has " + std::to_string(T));
        }
    } else {
        if (!(options.train_ratio > 0.0 && options.test_ratio > 0.0 && options.train_ratio + options.test_ratio < 1.0)) {
            throw DataError("split ratios must be positive and leave room for validation");
        }
        n_train = std::size_t(double(T) * options.train_ratio);
        n_test = std::size_t(double(T) * options.test_ratio);
        n_val = T - n_train - n_test;
    }
    const std::size_t end = n_train + n_val + n_test;
    // each split needs one window of its own targets plus lookback context
    const std::size_t need = lookback + horizon;
    if (n_train < need || n_val < horizon || n_test < horizon || n_train + n_val < lookback + horizon ||
        end < lookback + n_test) {
        double frac = options.fixed_rows ? 0.0 : std::min({options.train_ratio, 1.0 - options.train_ratio - options.test_ratio, options.test_ratio});
        std::string minimum = options.fixed_rows ? "train rows >= lookback + horizon = " + std::to_string(need)
                                                 : std::to_string(std::size_t(std::ceil(double(need) / frac)) + 1) + " rows";
        throw DataError("too few rows (" + std::to_string(T) + ") for lookback " + std::to_string(lookback) +
                        " and horizon " + std::to_string(horizon) + "; minimum " + minimum);
    }
    SplitSpec s;
    s.lookback = lookback;
    s.horizon = horizon;
    s.border1 = {0, n_train - lookback, end - n_test - lookback};
    s.border2 = {n_train, n_train + n_val, end};
    for (Split sp : {Split::train, Split::val, Split::test}) {
        if (s.windows(sp) == 0) {
            throw DataError("split " + to_string(sp) + " has no complete window for lookback " +
                            std::to_string(lookback) + " and horizon " + std::to_string(horizon));
        }
    }
    const std::size_t C = table.channels();
    s.mean.assign(C, 0.0);
    s.std.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double m = 0.0;
        for (std::size_t r = 0; r < n_train; ++r) m += table.values[r * C + c];
        m /= double(n_train);
        double v = 0.0;
        for (std::size_t r = 0; r < n_train; ++r) {
            const double d = table.values[r * C + c] - m;
            v += d * d;
        }
        v /= double(n_train);
        if (!(v > 0.0)) {
            throw DataError("channel '" + table.channel_names[c] +
                            "' is constant over the training rows (std = 0); drop the channel");
        }
        s.mean[c] = m;
        s.std[c] = std::sqrt(v);
    }
    return s;
}

Tensor<double> normalize(const Tensor<double>& values, const SplitSpec& spec) {
    const std::size_t C = spec.mean.size();
    if (values.rank() != 2 || values.shape()[1] != C) throw DimensionError("normalize: expected [T, " + std::to_string(C) + "]");
    Tensor<double> out = values;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (values[i] - spec.mean[i % C]) / spec.std[i % C];
    return out;
}

Tensor<double> denormalize(const Tensor<double>& values, const SplitSpec& spec) {
    const std::size_t C = spec.mean.size();
    if (values.rank() != 2 || values.shape()[1] != C) throw DimensionError("denormalize: expected [T, " + std::to_string(C) + "]");
    Tensor<double> out = values;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = values[i] * spec.std[i % C] + spec.mean[i % C];
    return out;
}

ForecastTask::ForecastTask(const SeriesTable& table, const SplitOptions& options, std::size_t lookback,
                           std::size_t horizon)
    : ForecastTask(table, make_splits(table, options, lookback, horizon)) {}

ForecastTask::ForecastTask(const SeriesTable& table, SplitSpec spec)
    : spec_(std::move(spec)), channels_(table.channels()), rows_(table.rows()) {
    if (spec_.mean.size() != channels_ || spec_.std.size() != channels_) {
        throw DataError("normalization statistics cover " + std::to_string(spec_.mean.size()) + " channels, table has " +
                        std::to_string(channels_));
    }
    if (spec_.border2[2] > rows_) throw DataError("split boundaries exceed the table length");
    norm_ = normalize(table.values, spec_);
}

std::size_t ForecastTask::origin(Split s, std::size_t i) const {
    if (i >= windows(s)) {
        throw std::out_of_range("window " + std::to_string(i) + " out of range for split " + to_string(s));
    }
    return spec_.border1[std::size_t(s)] + i;
}

void ForecastTask::window(Split s, std::size_t i, Tensor<double>& x, Tensor<double>& y) const {
    const std::size_t o = origin(s, i);
    const std::size_t L = spec_.lookback, H = spec_.horizon, C = channels_;
    x = Tensor<double>({C, L});
    y = Tensor<double>({C, H});
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t c = 0; c < C; ++c) x[c * L + t] = norm_[(o + t) * C + c];
    for (std::size_t t = 0; t < H; ++t)
        for (std::size_t c = 0; c < C; ++c) y[c * H + t] = norm_[(o + L + t) * C + c];
}

template <class T>
void ForecastTask::batch(Split s, const std::vector<std::size_t>& indices, Tensor<T>& x, Tensor<T>& y) const {
    const std::size_t L = spec_.lookback, H = spec_.horizon, C = channels_, B = indices.size();
    x = Tensor<T>({B, C, L});
    y = Tensor<T>({B, C, H});
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t o = origin(s, indices[b]);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t t = 0; t < L; ++t) x[(b * C + c) * L + t] = T(norm_[(o + t) * C + c]);
            for (std::size_t t = 0; t < H; ++t) y[(b * C + c) * H + t] = T(norm_[(o + L + t) * C + c]);
        }
    }
}

template void ForecastTask::batch(Split, const std::vector<std::size_t>&, Tensor<float>&, Tensor<float>&) const;
template void ForecastTask::batch(Split, const std::vector<std::size_t>&, Tensor<double>&, Tensor<double>&) const;

std::string to_string(Regime r) {
    switch (r) {
        case Regime::linear: return "linear";
        case Regime::polynomial: return "polynomial";
        case Regime::switching: return "switching";
    }
    return "linear";
}

Regime parse_regime(const std::string& name) {
    if (name == "linear") return Regime::linear;
    if (name == "polynomial") return Regime::polynomial;
    if (name == "switching") return Regime::switching;
    throw std::invalid_argument("unknown regime '" + name + "' (expected linear, polynomial or switching)");
}

namespace {

struct SlowWave {
    double offset;
    double amplitude;
    double period;
    double phase;

    double at(double t) const { return offset + amplitude * std::sin(2.0 * std::numbers::pi * t / period + phase); }
    nlohmann::json json() const {
        return {{"offset", offset}, {"amplitude", amplitude}, {"period", period}, {"phase", phase}};
    }
};

constexpr double kArRho = 0.99;
constexpr double kNoiseStd = 0.1;
constexpr std::int64_t kStartSeconds = 1467331200;  // 2016-07-01 00:00:00

}  // namespace

SynthResult synth_cdt(const SynthOptions& o) {
    if (o.channels < 2) {
        throw DataError("synth_cdt needs at least 2 channels (got " + std::to_string(o.channels) + ")");
    }
    if (o.length < 2) throw DataError("synth_cdt needs a length of at least 2");
    if (o.switch_interval == 0) throw DataError("synth_cdt: switch interval must be positive");
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;

    // base process: two seasonal sinusoids plus a persistent AR(1)
    std::vector<SlowWave> seasonal{{0.0, 0.6, 24.0, two_pi * unif(rng)}, {0.0, 0.4, 168.0, two_pi * unif(rng)}};
    const double ar_sigma = std::sqrt(1.0 - kArRho * kArRho);

    const std::size_t C = o.channels;
    std::vector<std::size_t> tau(C, 0);
    std::vector<SlowWave> alpha(C), beta(C), gamma(C);
    for (std::size_t c = 1; c < C; ++c) {
        tau[c] = o.tau ? *o.tau : 16 + std::size_t(unif(rng) * 49.0);
        alpha[c] = {0.6 + 0.8 * unif(rng), 0.2 + 0.3 * unif(rng), 2000.0 + 4000.0 * unif(rng), two_pi * unif(rng)};
        if (o.alpha) alpha[c] = {*o.alpha, 0.0, 1.0, 0.0};
        beta[c] = {0.3 + 0.4 * unif(rng), 0.1 + 0.2 * unif(rng), 2000.0 + 4000.0 * unif(rng), two_pi * unif(rng)};
        gamma[c] = {0.3 + 0.4 * unif(rng), 0.1 + 0.2 * unif(rng), 2000.0 + 4000.0 * unif(rng), two_pi * unif(rng)};
    }
    std::size_t max_tau = 0;
    for (std::size_t c = 1; c < C; ++c) max_tau = std::max(max_tau, 2 * tau[c]);

    // x0 over [-max_tau, length) so lagged reads never leave the record
    const std::size_t span = o.length + max_tau;
    std::vector<double> x0(span);
    double ar = gauss(rng);
    for (std::size_t i = 0; i < span; ++i) {
        ar = kArRho * ar + ar_sigma * gauss(rng);
        const double t = double(i) - double(max_tau);
        double v = ar;
        for (const auto& s : seasonal) v += s.at(t);
        x0[i] = v;
    }
    auto base = [&](std::size_t t, std::size_t lag) { return x0[t + max_tau - lag]; };
    auto x1_at = [&](std::size_t t, std::size_t lag) {
        // channel 1 always follows the linear law
        const double tt = double(t) - double(lag);
        return alpha[1].at(tt) * base(t, lag + tau[1]);
    };

    const double noise_std = o.noise ? kNoiseStd : 0.0;
    SeriesTable table;
    table.values = Tensor<double>({o.length, C});
    table.channel_names.push_back("x0");
    for (std::size_t c = 1; c < C; ++c) table.channel_names.push_back("x" + std::to_string(c));
    for (std::size_t t = 0; t < o.length; ++t) {
        table.timestamps.push_back(format_timestamp(kStartSeconds + std::int64_t(t) * 3600));
        const bool poly = o.regime == Regime::polynomial ||
                          (o.regime == Regime::switching && (t / o.switch_interval) % 2 == 1);
        table.values[t * C] = base(t, 0);
        for (std::size_t c = 1; c < C; ++c) {
            const double td = double(t);
            double v;
            if (c == 1 || !poly) {
                v = alpha[c].at(td) * base(t, tau[c]);
            } else {
                const double lagged = base(t, tau[c]);
                v = beta[c].at(td) * lagged * lagged + gamma[c].at(td) * lagged * x1_at(t, tau[c]);
            }
            if (noise_std > 0.0) v += noise_std * gauss(rng);
            table.values[t * C + c] = v;
        }
    }

    nlohmann::json chans = nlohmann::json::array();
    for (std::size_t c = 1; c < C; ++c) {
        chans.push_back({{"channel", c},
                         {"tau", tau[c]},
                         {"alpha", alpha[c].json()},
                         {"beta", beta[c].json()},
                         {"gamma", gamma[c].json()}});
    }
    nlohmann::json seas = nlohmann::json::array();
    for (const auto& s : seasonal) seas.push_back(s.json());
    SynthResult r;
    r.table = std::move(table);
    r.meta = {{"generator", "synth_cdt"},
              {"length", o.length},
              {"channels", C},
              {"seed", o.seed},
              {"regime", to_string(o.regime)},
              {"switch_interval", o.switch_interval},
              {"noise_std", noise_std},
              {"start", format_timestamp(kStartSeconds)},
              {"frequency_seconds", 3600},
              {"base", {{"ar_rho", kArRho}, {"ar_sigma", ar_sigma}, {"seasonal", seas}}},
              {"coupled_channels", chans}};
    return r;
}

}  // namespace polyssm::data
