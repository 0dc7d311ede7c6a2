#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "polyssm/hippo.hpp"
#include "polyssm/legendre.hpp"
#include "polyssm/ops.hpp"
#include "polyssm/pipeline.hpp"

namespace polyssm::pipeline {

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Flags that map one-to-one onto config keys; only those given on the
// command line are applied, after the config file.
struct Overrides {
    std::vector<std::pair<std::string, CLI::Option*>> flags;
    std::map<std::string, std::string> values;
    std::vector<std::string> sets;

    void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        flags.emplace_back(key, app->add_option(flag, values[key], help));
    }

    ConfigMap collect() const {
        ConfigMap map;
        for (const std::string& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
            map[s.substr(0, eq)] = s.substr(eq + 1);
        }
        for (const auto& [key, opt] : flags) {
            if (opt->count() > 0) map[key] = values.at(key);
        }
        return map;
    }
};

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "Nested key-value config file (model.*, data.*, train.*)");
    c.seed_opt = app->add_option("--seed", c.seed, "Seed for every random stream");
    c.threads_opt = app->add_option("--threads", c.threads, "Worker threads; 1 is fully deterministic");
}

void add_run_flags(CLI::App* app, Overrides& o) {
    o.add(app, "--data", "data.path", "Series CSV");
    o.add(app, "--lookback", "data.lookback", "Input window length");
    o.add(app, "--horizon", "data.horizon", "Forecast length");
    o.add(app, "--epochs", "train.epochs", "Maximum epochs");
    o.add(app, "--lr", "train.lr", "Adam learning rate");
    o.add(app, "--batch-size", "train.batch_size", "Minibatch size");
    o.add(app, "--variant", "model.variant", "full|gate_only|no_lcm|no_mopa|vanilla");
    o.add(app, "--precision", "train.precision", "f32|f64");
    o.add(app, "--scan", "train.scan", "sequential|parallel");
    app->add_option("--set", o.sets, "Any config key as key=value (repeatable)");
}

// `channels_given` reports whether model.channels was set explicitly; if
// not, the data file decides it.
RunConfig build_run_config(const Common& c, const Overrides& o, bool& channels_given) {
    RunConfig cfg;
    const ConfigMap file = c.config.empty() ? ConfigMap{} : load_config_file(c.config);
    const ConfigMap flags = o.collect();
    channels_given = file.count("model.channels") > 0 || flags.count("model.channels") > 0;
    apply_config(cfg, file);
    apply_config(cfg, flags);
    if (c.seed_opt->count() > 0) cfg.train.seed = c.seed;
    if (c.threads_opt->count() > 0) cfg.train.threads = c.threads;
    finalize(cfg);
    if (cfg.data.path.empty()) throw UsageError("no data file: pass --data or set data.path");
    return cfg;
}

void match_channels(RunConfig& cfg, const data::SeriesTable& table, bool channels_given) {
    if (!channels_given) {
        cfg.model.channels = table.channels();
        return;
    }
    if (table.channels() != cfg.model.channels) {
        throw data::DataError(cfg.data.path + " has " + std::to_string(table.channels()) +
                              " channels but model.channels is " + std::to_string(cfg.model.channels));
    }
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    return os;
}

// Writes to `path`, or to `fallback` when the path is empty or "-".
template <class F>
void with_output(const std::string& path, std::ostream& fallback, F&& body) {
    if (path.empty() || path == "-") {
        body(fallback);
        return;
    }
    std::ofstream os = open_out(path);
    body(os);
}

nlohmann::json spec_json(const data::SplitSpec& s, const std::string& path) {
    return {{"path", path},           {"lookback", s.lookback}, {"horizon", s.horizon}, {"border1", s.border1},
            {"border2", s.border2}, {"mean", s.mean},         {"std", s.std}};
}

data::SplitSpec spec_from_json(const nlohmann::json& j) {
    data::SplitSpec s;
    s.lookback = j.at("lookback").get<std::size_t>();
    s.horizon = j.at("horizon").get<std::size_t>();
    s.border1 = j.at("border1").get<std::array<std::size_t, 3>>();
    s.border2 = j.at("border2").get<std::array<std::size_t, 3>>();
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    return s;
}

template <class N>
std::vector<N> parse_list(const std::string& text, const std::string& flag) {
    std::vector<N> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
            out.push_back(static_cast<N>(v));
        } catch (const std::logic_error&) {
            throw UsageError(flag + " expects a comma-separated list of integers, got '" + text + "'");
        }
    }
    if (out.empty()) throw UsageError(flag + " is empty");
    return out;
}

// ---- train ---------------------------------------------------------------

template <class T>
void run_train(RunConfig cfg, bool channels_given, const std::string& ckpt, const std::string& metrics,
               std::ostream& out) {
    const data::SeriesTable table = data::load_csv(cfg.data.path);
    match_channels(cfg, table, channels_given);
    const data::ForecastTask task(table, cfg.data.split, cfg.data.lookback, cfg.data.horizon);
    model::Model<T> m(cfg.model, cfg.train.seed);
    std::ofstream mos = open_out(metrics);
    const TrainResult r = train(m, task, cfg.train, [&](const MetricsRecord& rec) {
        mos << rec.json(cfg.train.log_wall_time).dump() << '\n';
        mos.flush();
        out << rec.split << " epoch=" << rec.epoch << " mse=" << rec.mse << " mae=" << rec.mae << '\n';
    });
    nlohmann::json extra = {{"data", spec_json(task.spec(), cfg.data.path)}, {"train", to_json(cfg.train)}};
    extra["best_epoch"] = r.best_epoch;
    model::save_model(ckpt, m, extra);
    out << "checkpoint " << ckpt << " (best epoch " << r.best_epoch << ")\n";
}

// ---- eval / forecast / inspect -------------------------------------------

bool checkpoint_is_f64(const std::string& path) {
    const model::CheckpointFile f = model::read_checkpoint(path);
    return !f.arrays.empty() && f.arrays.front().dtype == DType::f64;
}

void require_ckpt(const std::string& ckpt, const std::string& cmd) {
    if (ckpt.empty()) throw UsageError(cmd + ": missing required option --ckpt <path>");
}

struct Loaded {
    data::SeriesTable table;
    data::SplitSpec spec;
};

Loaded load_for_checkpoint(const nlohmann::json& extra, const std::string& data_flag, std::size_t channels) {
    if (!extra.contains("data")) throw data::DataError("checkpoint carries no data statistics");
    const std::string path = data_flag.empty() ? extra["data"].value("path", std::string()) : data_flag;
    if (path.empty()) throw UsageError("no data file: pass --data");
    Loaded l{data::load_csv(path), spec_from_json(extra["data"])};
    if (l.table.channels() != channels) {
        throw data::DataError(path + " has " + std::to_string(l.table.channels()) + " channels, checkpoint expects " +
                              std::to_string(channels));
    }
    return l;
}

template <class T>
void run_eval(const std::string& ckpt, const std::string& data_path, const std::string& split, unsigned threads,
              std::ostream& out) {
    nlohmann::json extra;
    model::Model<T> m = model::load_model<T>(ckpt, &extra);
    const Loaded l = load_for_checkpoint(extra, data_path, m.config().channels);
    const data::ForecastTask task(l.table, l.spec);
    model::ForwardOptions opts;
    opts.threads = threads;
    const MetricsRecord rec = evaluate(m, task, data::parse_split(split), opts);
    out << rec.json(false).dump() << '\n';
}

template <class T>
void run_forecast(const std::string& ckpt, const std::string& data_path, long origin, const std::string& out_path,
                  std::ostream& out) {
    nlohmann::json extra;
    model::Model<T> m = model::load_model<T>(ckpt, &extra);
    const Loaded l = load_for_checkpoint(extra, data_path, m.config().channels);
    const std::size_t W = m.config().patch.lookback, H = m.config().horizon, C = l.table.channels();
    const std::size_t rows = l.table.rows();
    if (rows < W) throw data::DataError("need at least " + std::to_string(W) + " rows to forecast");
    const std::size_t start = origin < 0 ? rows - W : std::size_t(origin);
    if (start + W > rows) throw UsageError("--origin leaves fewer than lookback rows");

    const Tensor<double> norm = data::normalize(l.table.values, l.spec);
    Tensor<T> x({1, C, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < W; ++t) x[c * W + t] = T(norm[(start + t) * C + c]);
    const Tensor<T> pred = m.predict(x);
    Tensor<double> steps({H, C});
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t c = 0; c < C; ++c) steps[h * C + c] = double(pred[c * H + h]);
    const Tensor<double> values = data::denormalize(steps, l.spec);

    const std::size_t last = start + W - 1;
    const std::int64_t t_last = data::parse_timestamp(l.table.timestamps[last]);
    const std::int64_t dt = last > 0 ? t_last - data::parse_timestamp(l.table.timestamps[last - 1]) : 3600;
    with_output(out_path, out, [&](std::ostream& os) {
        os << "date";
        for (const auto& name : l.table.channel_names) os << ',' << name;
        os << '\n';
        os.precision(10);
        for (std::size_t h = 0; h < H; ++h) {
            os << data::format_timestamp(t_last + dt * std::int64_t(h + 1));
            for (std::size_t c = 0; c < C; ++c) os << ',' << values[h * C + c];
            os << '\n';
        }
    });
}

template <class T>
void run_inspect(const std::string& ckpt, const std::string& what, const std::string& data_path, std::size_t windows,
                 std::ostream& os) {
    nlohmann::json extra;
    model::Model<T> m = model::load_model<T>(ckpt, &extra);
    os.precision(10);
    if (what == "lcm" || what == "mopa") {
        os << "block,row,col,value\n";
        for (std::size_t b = 0; b < m.blocks.size(); ++b) {
            const Tensor<T>& mat = what == "lcm" ? m.blocks[b]->poly.l_mat.value : m.blocks[b]->poly.m_mat.value;
            const std::size_t R = mat.shape()[0], K = mat.shape()[1];
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < K; ++j) os << b << ',' << i << ',' << j << ',' << mat[i * K + j] << '\n';
        }
        return;
    }
    if (what != "gates") throw UsageError("--what must be lcm, mopa or gates");
    if (m.config().variant != polyops::Variant::full) throw UsageError("gates are only defined for the full variant");
    const Loaded l = load_for_checkpoint(extra, data_path, m.config().channels);
    const data::ForecastTask task(l.table, l.spec);
    const std::size_t n = std::min(windows, task.windows(data::Split::test));
    if (n == 0) throw data::DataError("test split has no windows");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i * task.windows(data::Split::test) / n;
    Tensor<T> x, y;
    task.batch(data::Split::test, idx, x, y);
    std::vector<Tensor<double>> states;
    model::ForwardOptions opts;
    opts.states = &states;
    m.predict(x, opts);
    os << "block,channel,order,g_lcm,g_mopa\n";
    for (std::size_t b = 0; b < states.size(); ++b) {
        // [B, C, L, Di, N] -> [B, L, Di, C, N]
        const Tensor<T> h = permuted(states[b], {0, 2, 3, 1, 4}).cast<T>();
        const auto [gl, gm] = polyops::mean_gates(h, m.blocks[b]->poly);
        const std::size_t C = gl.shape()[0], K = gl.shape()[1];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < K; ++k)
                os << b << ',' << c << ',' << k + 2 << ',' << gl[c * K + k] << ',' << gm[c * K + k] << '\n';
    }
}

// ---- hippo-demo ----------------------------------------------------------

std::vector<hippo::Sample> read_signal_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data::DataError("cannot read " + path);
    std::vector<hippo::Sample> s;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw data::DataError(path + ":" + std::to_string(lineno) + ": expected t,u");
        try {
            s.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
        } catch (const std::logic_error&) {
            if (lineno == 1) continue;  // header
            throw data::DataError(path + ":" + std::to_string(lineno) + ": non-numeric value");
        }
        if (s.size() > 1 && !(s.back().t > s[s.size() - 2].t)) {
            throw data::DataError(path + ":" + std::to_string(lineno) + ": times must increase");
        }
    }
    if (s.size() < 2) throw data::DataError(path + ": need at least two samples");
    return s;
}

void run_hippo_demo(std::size_t N, const std::string& signal, double t0, double t1, std::size_t samples,
                    std::ostream& os) {
    std::vector<hippo::Sample> s, integrate_on;
    if (signal.rfind("csv:", 0) == 0) {
        s = read_signal_csv(signal.substr(4));
    } else {
        if (signal != "sin" && signal != "square") throw UsageError("--signal must be sin, square or csv:<path>");
        if (!(t1 > t0) || t0 < 0.0 || samples < 2) throw UsageError("need 0 <= t0 < t1 and at least 2 samples");
        auto grid = [&](std::size_t count) {
            std::vector<hippo::Sample> g;
            for (std::size_t i = 0; i < count; ++i) {
                const double t = t0 + (t1 - t0) * double(i) / double(count - 1);
                g.push_back({t, signal == "sin" ? std::sin(t) : (std::sin(t) >= 0.0 ? 1.0 : -1.0)});
            }
            return g;
        };
        s = grid(samples);
        // The explicit integrator needs small steps whatever the output resolution.
        integrate_on = grid(std::max<std::size_t>(samples, 1000 * N));
    }
    const hippo::CoeffTrajectory traj = hippo::legs_online_approx(integrate_on.empty() ? s : integrate_on, N);
    const double T = s.back().t;
    const auto all = traj.coeffs.data();
    const std::vector<double> c(all.end() - std::ptrdiff_t(N), all.end());
    os << "t,u,u_hat,abs_err\n";
    os.precision(12);
    for (const auto& p : s) {
        const double uh = hippo::reconstruct(c, T, p.t);
        os << p.t << ',' << p.u << ',' << uh << ',' << std::abs(uh - p.u) << '\n';
    }
}

// ---- basis-check ---------------------------------------------------------

void run_basis_check(std::size_t channels, unsigned degree, std::ostream& os) {
    if (channels < 1) throw UsageError("--c must be >= 1");
    const auto idx = legendre::enumerate_multi_indices(channels, degree);
    const Tensor<double> gram = legendre::gram_matrix(channels, degree, legendre::gauss_legendre(degree + 1));
    auto label = [](const legendre::MultiIndex& m) {
        std::string s = "P";
        for (std::size_t c = 0; c < m.degrees.size(); ++c) s += (c == 0 ? "" : "_") + std::to_string(m.degrees[c]);
        return s;
    };
    os << "basis";
    for (const auto& m : idx) os << ',' << label(m);
    os << '\n';
    os.precision(17);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        os << label(idx[i]);
        for (std::size_t j = 0; j < idx.size(); ++j) os << ',' << gram[i * idx.size() + j];
        os << '\n';
    }
}

// ---- scan-bench ----------------------------------------------------------

template <class T>
void run_scan_bench(const std::vector<std::size_t>& lengths, const std::string& impl, std::size_t width,
                    std::size_t state, std::size_t reps, unsigned threads, std::uint64_t seed, std::ostream& os) {
    if (impl != "seq" && impl != "par" && impl != "both") throw UsageError("--impl must be seq, par or both");
    if (reps < 1) throw UsageError("--reps must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ua(0.5, 1.0);
    std::normal_distribution<double> nb(0.0, 1.0);
    os << "L,impl,wall_ms,max_abs_diff_vs_seq\n";
    os.precision(10);
    for (std::size_t L : lengths) {
        if (L < 1) throw UsageError("--l entries must be >= 1");
        Tensor<T> a({L, width, state}), b({L, width, state});
        for (std::size_t i = 0; i < a.numel(); ++i) {
            a[i] = T(ua(rng));
            b[i] = T(nb(rng));
        }
        auto time = [&](sscan::ScanMode mode, Tensor<T>& result) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < reps; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                result = sscan::scan(a, b, 0, mode, threads);
                best = std::min(best,
                                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            }
            return best;
        };
        Tensor<T> seq, par;
        const double seq_ms = time(sscan::ScanMode::sequential, seq);
        if (impl != "par") os << L << ",seq," << seq_ms << ",0\n";
        if (impl != "seq") {
            const double par_ms = time(sscan::ScanMode::parallel, par);
            double diff = 0.0;
            for (std::size_t i = 0; i < seq.numel(); ++i) diff = std::max(diff, std::abs(double(par[i]) - double(seq[i])));
            os << L << ",par," << par_ms << ',' << diff << '\n';
        }
    }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Poly state-space forecaster: training, evaluation and diagnostics", "polyssm"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    // train
    Common train_c;
    Overrides train_o;
    std::string train_ckpt = "model.ckpt", train_metrics = "metrics.jsonl";
    CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint and metrics JSONL");
    add_common(train_cmd, train_c);
    add_run_flags(train_cmd, train_o);
    train_cmd->add_option("--out", train_ckpt, "Checkpoint path")->capture_default_str();
    train_cmd->add_option("--metrics", train_metrics, "Metrics JSONL path")->capture_default_str();

    // eval
    std::string eval_ckpt, eval_data, eval_split = "test";
    unsigned eval_threads = 1;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path (required)");
    eval_cmd->add_option("--data", eval_data, "Series CSV (default: the training file)");
    eval_cmd->add_option("--split", eval_split, "train|val|test")->capture_default_str();
    eval_cmd->add_option("--threads", eval_threads, "Worker threads");

    // ablate
    Common abl_c;
    Overrides abl_o;
    std::string abl_seeds = "0,1,2", abl_horizons, abl_out = "ablation.csv", abl_summary = "ablation_summary.csv";
    CLI::App* abl_cmd = app.add_subcommand("ablate", "Train every variant over seeds and horizons");
    add_common(abl_cmd, abl_c);
    add_run_flags(abl_cmd, abl_o);
    abl_cmd->add_option("--seeds", abl_seeds, "Comma-separated seeds")->capture_default_str();
    abl_cmd->add_option("--horizons", abl_horizons, "Comma-separated horizons (default: data.horizon)");
    abl_cmd->add_option("--out", abl_out, "Per-run CSV")->capture_default_str();
    abl_cmd->add_option("--summary", abl_summary, "Per-variant mean CSV")->capture_default_str();

    // forecast
    std::string fc_ckpt, fc_data, fc_out;
    long fc_origin = -1;
    CLI::App* fc_cmd = app.add_subcommand("forecast", "Forecast the horizon after a lookback window");
    fc_cmd->add_option("--ckpt", fc_ckpt, "Checkpoint path (required)");
    fc_cmd->add_option("--data", fc_data, "Series CSV (default: the training file)");
    fc_cmd->add_option("--origin", fc_origin, "First row of the lookback window (default: the last window)");
    fc_cmd->add_option("--out", fc_out, "Output CSV (default: stdout)");

    // synth
    data::SynthOptions so;
    std::string synth_regime = "switching", synth_out = "data.csv";
    double synth_alpha = 0.0;
    std::size_t synth_tau = 0;
    bool synth_no_noise = false;
    CLI::App* synth_cmd = app.add_subcommand("synth", "Write a synthetic series with time-varying channel coupling");
    synth_cmd->add_option("--regime", synth_regime, "linear|polynomial|switching")->capture_default_str();
    synth_cmd->add_option("--c", so.channels, "Channels")->capture_default_str();
    synth_cmd->add_option("--t", so.length, "Rows")->capture_default_str();
    synth_cmd->add_option("--seed", so.seed, "Generator seed")->capture_default_str();
    synth_cmd->add_option("--switch-interval", so.switch_interval, "Rows per regime segment")->capture_default_str();
    CLI::Option* alpha_opt = synth_cmd->add_option("--alpha", synth_alpha, "Constant coupling strength");
    CLI::Option* tau_opt = synth_cmd->add_option("--tau", synth_tau, "Constant coupling lag");
    synth_cmd->add_flag("--no-noise", synth_no_noise, "Disable observation noise");
    synth_cmd->add_option("--out", synth_out, "Output CSV; metadata goes next to it as <stem>.meta.json")
        ->capture_default_str();

    // hippo-demo
    std::size_t hd_n = 32, hd_samples = 2000;
    std::string hd_signal = "sin";
    double hd_t0 = 1.0, hd_t1 = 10.0;
    CLI::App* hd_cmd = app.add_subcommand("hippo-demo", "Online Legendre approximation of a signal");
    hd_cmd->add_option("--n", hd_n, "State size")->capture_default_str();
    hd_cmd->add_option("--signal", hd_signal, "sin|square|csv:<path with t,u columns>")->capture_default_str();
    hd_cmd->add_option("--t0", hd_t0, "Start time")->capture_default_str();
    hd_cmd->add_option("--t1", hd_t1, "End time")->capture_default_str();
    hd_cmd->add_option("--samples", hd_samples, "Uniform samples on [t0, t1]")->capture_default_str();

    // basis-check
    std::size_t bc_c = 2;
    unsigned bc_deg = 3;
    CLI::App* bc_cmd = app.add_subcommand("basis-check", "Gram matrix of the multivariate Legendre basis");
    bc_cmd->add_option("--c", bc_c, "Variables")->capture_default_str();
    bc_cmd->add_option("--deg", bc_deg, "Maximum total degree")->capture_default_str();

    // scan-bench
    std::string sb_l = "64,256,1024", sb_impl = "both", sb_precision = "f32";
    std::size_t sb_d = 32, sb_n = 8, sb_reps = 3;
    unsigned sb_threads = 1;
    std::uint64_t sb_seed = 0;
    CLI::App* sb_cmd = app.add_subcommand("scan-bench", "Time the sequential and parallel scans");
    sb_cmd->add_option("--l", sb_l, "Comma-separated sequence lengths")->capture_default_str();
    sb_cmd->add_option("--impl", sb_impl, "seq|par|both")->capture_default_str();
    sb_cmd->add_option("--d", sb_d, "Channels per step")->capture_default_str();
    sb_cmd->add_option("--n", sb_n, "State size")->capture_default_str();
    sb_cmd->add_option("--reps", sb_reps, "Repetitions; the fastest is reported")->capture_default_str();
    sb_cmd->add_option("--precision", sb_precision, "f32|f64")->capture_default_str();
    sb_cmd->add_option("--threads", sb_threads, "Worker threads")->capture_default_str();
    sb_cmd->add_option("--seed", sb_seed, "Input seed")->capture_default_str();

    // inspect
    std::string in_ckpt, in_what = "lcm", in_data, in_out;
    std::size_t in_windows = 64;
    CLI::App* in_cmd = app.add_subcommand("inspect", "Dump LCM, MOPA or mean gate values of a checkpoint");
    in_cmd->add_option("--ckpt", in_ckpt, "Checkpoint path (required)");
    in_cmd->add_option("--what", in_what, "lcm|mopa|gates")->capture_default_str();
    in_cmd->add_option("--data", in_data, "Series CSV for gates (default: the training file)");
    in_cmd->add_option("--windows", in_windows, "Test windows averaged for gates")->capture_default_str();
    in_cmd->add_option("--out", in_out, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kUsage;
    }

    try {
        if (*train_cmd) {
            bool given = false;
            const RunConfig cfg = build_run_config(train_c, train_o, given);
            if (cfg.train.precision == DType::f32) run_train<float>(cfg, given, train_ckpt, train_metrics, out);
            else run_train<double>(cfg, given, train_ckpt, train_metrics, out);
        } else if (*eval_cmd) {
            require_ckpt(eval_ckpt, "eval");
            if (checkpoint_is_f64(eval_ckpt)) run_eval<double>(eval_ckpt, eval_data, eval_split, eval_threads, out);
            else run_eval<float>(eval_ckpt, eval_data, eval_split, eval_threads, out);
        } else if (*abl_cmd) {
            bool given = false;
            RunConfig cfg = build_run_config(abl_c, abl_o, given);
            const auto seeds = parse_list<std::uint64_t>(abl_seeds, "--seeds");
            const auto horizons = abl_horizons.empty() ? std::vector<std::size_t>{cfg.data.horizon}
                                                       : parse_list<std::size_t>(abl_horizons, "--horizons");
            const data::SeriesTable table = data::load_csv(cfg.data.path);
            match_channels(cfg, table, given);
            const AblationResult r = ablate(table, cfg, seeds, horizons, &err);
            std::ofstream rows = open_out(abl_out), summary = open_out(abl_summary);
            write_ablation_csv(r, rows, summary);
            std::ostringstream shown, ignored;
            write_ablation_csv(r, ignored, shown);
            out << shown.str();
        } else if (*fc_cmd) {
            require_ckpt(fc_ckpt, "forecast");
            if (checkpoint_is_f64(fc_ckpt)) run_forecast<double>(fc_ckpt, fc_data, fc_origin, fc_out, out);
            else run_forecast<float>(fc_ckpt, fc_data, fc_origin, fc_out, out);
        } else if (*synth_cmd) {
            so.regime = data::parse_regime(synth_regime);
            if (alpha_opt->count() > 0) so.alpha = synth_alpha;
            if (tau_opt->count() > 0) so.tau = synth_tau;
            so.noise = !synth_no_noise;
            const data::SynthResult r = data::synth_cdt(so);
            data::write_csv(r.table, synth_out);
            std::string stem = synth_out;
            if (stem.size() > 4 && stem.compare(stem.size() - 4, 4, ".csv") == 0) stem.resize(stem.size() - 4);
            std::ofstream meta = open_out(stem + ".meta.json");
            meta << r.meta.dump(2) << '\n';
            out << "wrote " << synth_out << " and " << stem << ".meta.json\n";
        } else if (*hd_cmd) {
            run_hippo_demo(hd_n, hd_signal, hd_t0, hd_t1, hd_samples, out);
        } else if (*bc_cmd) {
            run_basis_check(bc_c, bc_deg, out);
        } else if (*sb_cmd) {
            const auto lengths = parse_list<std::size_t>(sb_l, "--l");
            if (parse_dtype(sb_precision) == DType::f32)
                run_scan_bench<float>(lengths, sb_impl, sb_d, sb_n, sb_reps, sb_threads, sb_seed, out);
            else
                run_scan_bench<double>(lengths, sb_impl, sb_d, sb_n, sb_reps, sb_threads, sb_seed, out);
        } else if (*in_cmd) {
            require_ckpt(in_ckpt, "inspect");
            with_output(in_out, out, [&](std::ostream& os) {
                if (checkpoint_is_f64(in_ckpt)) run_inspect<double>(in_ckpt, in_what, in_data, in_windows, os);
                else run_inspect<float>(in_ckpt, in_what, in_data, in_windows, os);
            });
        }
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const data::DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::domain_error& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    }
    return kOk;
}

}  // namespace polyssm::pipeline
