#include "polyssm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "polyssm/ops.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace polyssm::pipeline {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string unquote(std::string v) {
    if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\''))) {
        return v.substr(1, v.size() - 2);
    }
    return v;
}

template <class N>
N to_number(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if constexpr (std::is_floating_point_v<N>) {
            const double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return N(d);
        } else {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
            const unsigned long long u = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return N(u);
        }
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': invalid number '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap map;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw UsageError("config line " + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        const std::string value = unquote(trim(line.substr(eq + 1)));
        if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        map[key] = value;
    }
    return map;
}

ConfigMap load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("train.lr must be a finite non-negative number");
    if (epochs < 1) throw UsageError("train.epochs must be >= 1");
    if (batch_size < 1) throw UsageError("train.batch_size must be >= 1");
    if (train_stride < 1 || val_stride < 1) throw UsageError("train strides must be >= 1");
    if (threads < 1) throw UsageError("threads must be >= 1");
    if (grad_clip < 0.0) throw UsageError("train.grad_clip must be >= 0");
}

void apply_config(RunConfig& cfg, const ConfigMap& map) {
    for (const auto& [key, v] : map) {
        auto& m = cfg.model;
        auto& d = cfg.data;
        auto& t = cfg.train;
        if (key == "model.channels") m.channels = to_number<std::size_t>(key, v);
        else if (key == "model.d_model") m.d_model = to_number<std::size_t>(key, v);
        else if (key == "model.d_inner") m.d_inner = to_number<std::size_t>(key, v);
        else if (key == "model.state") m.state = to_number<std::size_t>(key, v);
        else if (key == "model.layers") m.layers = to_number<std::size_t>(key, v);
        else if (key == "model.conv_width") m.conv_width = to_number<std::size_t>(key, v);
        else if (key == "model.dropout") m.dropout = to_number<double>(key, v);
        else if (key == "model.instance_norm") m.instance_norm = to_bool(key, v);
        else if (key == "model.variant") {
            try {
                m.variant = polyops::parse_variant(v);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        else if (key == "model.patch_len") m.patch.patch_len = to_number<std::size_t>(key, v);
        else if (key == "model.stride") m.patch.stride = to_number<std::size_t>(key, v);
        else if (key == "data.path") d.path = v;
        else if (key == "data.lookback") d.lookback = to_number<std::size_t>(key, v);
        else if (key == "data.horizon") d.horizon = to_number<std::size_t>(key, v);
        else if (key == "data.train_ratio") d.split.train_ratio = to_number<double>(key, v);
        else if (key == "data.test_ratio") d.split.test_ratio = to_number<double>(key, v);
        else if (key == "data.fixed_rows") {
            std::array<std::size_t, 3> rows{};
            std::stringstream ss(v);
            std::string part;
            std::size_t i = 0;
            while (std::getline(ss, part, ',')) {
                if (i == 3) throw UsageError("data.fixed_rows takes three counts: train,val,test");
                rows[i++] = to_number<std::size_t>(key, trim(part));
            }
            if (i != 3) throw UsageError("data.fixed_rows takes three counts: train,val,test");
            d.split.fixed_rows = rows;
        }
        else if (key == "train.lr") t.lr = to_number<double>(key, v);
        else if (key == "train.epochs") t.epochs = to_number<std::size_t>(key, v);
        else if (key == "train.batch_size") t.batch_size = to_number<std::size_t>(key, v);
        else if (key == "train.patience") t.patience = to_number<std::size_t>(key, v);
        else if (key == "train.seed") t.seed = to_number<std::uint64_t>(key, v);
        else if (key == "train.precision") {
            try {
                t.precision = parse_dtype(v);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        else if (key == "train.scan") {
            try {
                t.scan = sscan::parse_scan_mode(v);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        else if (key == "train.threads") t.threads = to_number<unsigned>(key, v);
        else if (key == "train.train_stride") t.train_stride = to_number<std::size_t>(key, v);
        else if (key == "train.val_stride") t.val_stride = to_number<std::size_t>(key, v);
        else if (key == "train.max_batches") t.max_batches = to_number<std::size_t>(key, v);
        else if (key == "train.grad_clip") t.grad_clip = to_number<double>(key, v);
        else if (key == "train.log_wall_time") t.log_wall_time = to_bool(key, v);
        else throw UsageError("unknown config key '" + key + "'");
    }
}

void finalize(RunConfig& cfg) {
    cfg.model.patch.lookback = cfg.data.lookback;
    cfg.model.horizon = cfg.data.horizon;
    try {
        cfg.model.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    cfg.train.validate();
}

nlohmann::json to_json(const TrainConfig& t) {
    return {{"lr", t.lr},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"patience", t.patience},
            {"seed", t.seed},
            {"precision", to_string(t.precision)},
            {"scan", sscan::to_string(t.scan)},
            {"train_stride", t.train_stride},
            {"val_stride", t.val_stride},
            {"max_batches", t.max_batches},
            {"grad_clip", t.grad_clip}};
}

nlohmann::json MetricsRecord::json(bool with_wall_time) const {
    nlohmann::json j = {{"split", split}, {"horizon", horizon}, {"epoch", epoch}, {"mse", mse}, {"mae", mae}};
    if (with_wall_time) j["wall_ms"] = wall_ms;
    return j;
}

template <class T>
Metrics compute_metrics(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) {
        throw DimensionError("metrics: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
    }
    if (pred.numel() == 0) throw data::DataError("metrics over an empty set");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = double(pred[i]) - double(target[i]);
        se += d * d;
        ae += std::abs(d);
    }
    return {se / double(pred.numel()), ae / double(pred.numel())};
}

template <class T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Parameter<T>* p : params_) {
        m_.emplace_back(p->value.numel(), 0.0);
        v_.emplace_back(p->value.numel(), 0.0);
    }
}

template <class T>
void Adam<T>::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            const double g = p.grad[k];
            m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
            v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
            const double mh = m_[i][k] / c1;
            const double vh = v_[i][k] / c2;
            p.value[k] = T(double(p.value[k]) - lr_ * mh / (std::sqrt(vh) + eps_));
        }
    }
}

template <class T>
void Adam<T>::zero_grad() {
    for (Parameter<T>* p : params_) p->zero_grad();
}

template <class T>
Metrics evaluate_split(model::Model<T>& m, const data::ForecastTask& task, data::Split split,
                       const model::ForwardOptions& opts, std::size_t batch_size, std::size_t stride) {
    const std::size_t n = task.windows(split);
    if (n == 0) throw data::DataError("split " + data::to_string(split) + " has no windows");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, stride)) idx.push_back(i);
    double se = 0.0, ae = 0.0;
    std::size_t count = 0;
    Tensor<T> x, y;
    for (std::size_t s = 0; s < idx.size(); s += batch_size) {
        const std::vector<std::size_t> part(idx.begin() + s, idx.begin() + std::min(idx.size(), s + batch_size));
        task.batch(split, part, x, y);
        const Tensor<T> pred = m.predict(x, opts);
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const double d = double(pred[i]) - double(y[i]);
            se += d * d;
            ae += std::abs(d);
        }
        count += pred.numel();
    }
    return {se / double(count), ae / double(count)};
}

template <class T>
MetricsRecord evaluate(model::Model<T>& m, const data::ForecastTask& task, data::Split split,
                       const model::ForwardOptions& opts, std::size_t batch_size) {
    const auto start = std::chrono::steady_clock::now();
    const Metrics r = evaluate_split(m, task, split, opts, batch_size, 1);
    MetricsRecord rec;
    rec.split = data::to_string(split);
    rec.horizon = task.spec().horizon;
    rec.mse = r.mse;
    rec.mae = r.mae;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

namespace {

template <class T>
std::string parameter_norms(model::Model<T>& m) {
    std::ostringstream os;
    bool first = true;
    for (auto& [name, p] : m.named_parameters()) {
        double s = 0.0;
        for (T v : p->value.storage()) s += double(v) * double(v);
        os << (first ? "" : ", ") << name << "=" << std::sqrt(s);
        first = false;
    }
    return os.str();
}

// Training allocates and frees the same large buffers every step; keeping
// them on the heap avoids an mmap/page-fault cycle per tensor.
void keep_large_allocations() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)done;
#endif
}

template <class T>
void clip_gradients(const std::vector<Parameter<T>*>& params, double max_norm) {
    double s = 0.0;
    for (Parameter<T>* p : params)
        for (T g : p->grad.storage()) s += double(g) * double(g);
    const double norm = std::sqrt(s);
    if (norm <= max_norm || norm == 0.0) return;
    const double f = max_norm / norm;
    for (Parameter<T>* p : params)
        for (T& g : p->grad.storage()) g = T(double(g) * f);
}

}  // namespace

template <class T>
TrainResult train(model::Model<T>& m, const data::ForecastTask& task, const TrainConfig& cfg,
                  const std::function<void(const MetricsRecord&)>& on_record) {
    cfg.validate();
    keep_large_allocations();
    const std::size_t horizon = task.spec().horizon;
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < task.windows(data::Split::train); i += cfg.train_stride) order.push_back(i);
    if (order.empty()) throw data::DataError("training split has no windows");

    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Parameter<T>*> params = m.parameters();
    Adam<T> opt(params, cfg.lr);
    opt.zero_grad();

    model::ForwardOptions fwd;
    fwd.mode = cfg.scan;
    fwd.threads = cfg.threads;
    model::ForwardOptions train_fwd = fwd;
    train_fwd.training = true;
    train_fwd.rng = &dropout_rng;

    TrainResult result;
    auto emit = [&](const MetricsRecord& r) {
        result.history.push_back(r);
        if (on_record) on_record(r);
    };
    std::vector<Tensor<T>> best;
    for (Parameter<T>* p : params) best.push_back(p->value);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::size_t global_step = 0;

    Tensor<T> x, y;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        std::size_t batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
        if (cfg.max_batches > 0) batches = std::min(batches, cfg.max_batches);
        double se = 0.0, ae = 0.0;
        std::size_t count = 0;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t lo = b * cfg.batch_size;
            const std::vector<std::size_t> part(order.begin() + lo,
                                                order.begin() + std::min(order.size(), lo + cfg.batch_size));
            task.batch(data::Split::train, part, x, y);
            try {
                Graph<T> g;
                Var<T> pred = m.forward(g, x, train_fwd);
                Var<T> loss = ops::mse_loss(pred, g.input(y));
                g.backward(loss);
                for (Parameter<T>* p : params) {
                    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in " + p->name);
                }
                if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
                opt.step();
                opt.zero_grad();
                const auto& pv = pred.value();
                for (std::size_t i = 0; i < pv.numel(); ++i) {
                    const double d = double(pv[i]) - double(y[i]);
                    se += d * d;
                    ae += std::abs(d);
                }
                count += pv.numel();
            } catch (const NumericError& e) {
                throw NumericError("training diverged at step " + std::to_string(global_step) + " (epoch " +
                                   std::to_string(epoch) + "): " + e.what() + "; parameter norms: " + parameter_norms(m));
            }
            ++global_step;
        }
        const double train_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        emit({"train", horizon, se / double(count), ae / double(count), epoch, train_ms});

        const auto vstart = std::chrono::steady_clock::now();
        const Metrics val = evaluate_split(m, task, data::Split::val, fwd, 64, cfg.val_stride);
        const double val_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - vstart).count();
        emit({"val", horizon, val.mse, val.mae, epoch, val_ms});
        if (val.mse < best_val) {
            best_val = val.mse;
            result.best_epoch = epoch;
            since_best = 0;
            for (std::size_t i = 0; i < params.size(); ++i) best[i] = params[i]->value;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    result.best_val_mse = best_val;
    result.test = evaluate(m, task, data::Split::test, fwd);
    result.test.epoch = result.best_epoch;
    emit(result.test);
    return result;
}

namespace {

template <class T>
MetricsRecord run_cell(const data::ForecastTask& task, const RunConfig& cfg) {
    model::Model<T> m(cfg.model, cfg.train.seed);
    return train(m, task, cfg.train).test;
}

}  // namespace

AblationResult ablate(const data::SeriesTable& table, const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                      const std::vector<std::size_t>& horizons, std::ostream* progress) {
    if (seeds.empty() || horizons.empty()) throw UsageError("ablate needs at least one seed and one horizon");
    AblationResult result;
    for (std::size_t h : horizons) {
        RunConfig cfg = base;
        cfg.data.horizon = h;
        finalize(cfg);
        const data::ForecastTask task(table, cfg.data.split, cfg.data.lookback, h);
        for (polyops::Variant v : polyops::all_variants()) {
            double mse = 0.0, mae = 0.0;
            for (std::uint64_t seed : seeds) {
                RunConfig cell = cfg;
                cell.model.variant = v;
                cell.train.seed = seed;
                const auto start = std::chrono::steady_clock::now();
                const MetricsRecord rec = cell.train.precision == DType::f32 ? run_cell<float>(task, cell)
                                                                              : run_cell<double>(task, cell);
                result.rows.push_back({v, h, seed, rec.mse, rec.mae});
                mse += rec.mse;
                mae += rec.mae;
                if (progress != nullptr) {
                    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                    *progress << "ablate: variant=" << polyops::to_string(v) << " horizon=" << h << " seed=" << seed
                              << " test_mse=" << rec.mse << " test_mae=" << rec.mae << " (" << s << " s)\n";
                    progress->flush();
                }
            }
            result.summary.push_back({v, h, seeds.size(), mse / double(seeds.size()), mae / double(seeds.size())});
        }
    }
    return result;
}

void write_ablation_csv(const AblationResult& r, std::ostream& rows, std::ostream& summary) {
    rows << "variant,horizon,seed,mse,mae\n";
    rows.precision(10);
    for (const auto& row : r.rows) {
        rows << polyops::to_string(row.variant) << ',' << row.horizon << ',' << row.seed << ',' << row.mse << ','
             << row.mae << '\n';
    }
    summary << "variant,horizon,seeds,mse,mae\n";
    summary.precision(10);
    for (const auto& s : r.summary) {
        summary << polyops::to_string(s.variant) << ',' << s.horizon << ',' << s.seeds << ',' << s.mse << ',' << s.mae
                << '\n';
    }
}

#define POLYSSM_INSTANTIATE_PIPELINE(T)                                                                         \
    template Metrics compute_metrics(const Tensor<T>&, const Tensor<T>&);                                      \
    template class Adam<T>;                                                                                     \
    template Metrics evaluate_split(model::Model<T>&, const data::ForecastTask&, data::Split,                  \
                                    const model::ForwardOptions&, std::size_t, std::size_t);                   \
    template MetricsRecord evaluate(model::Model<T>&, const data::ForecastTask&, data::Split,                  \
                                    const model::ForwardOptions&, std::size_t);                                \
    template TrainResult train(model::Model<T>&, const data::ForecastTask&, const TrainConfig&,                \
                               const std::function<void(const MetricsRecord&)>&);

POLYSSM_INSTANTIATE_PIPELINE(float)
POLYSSM_INSTANTIATE_PIPELINE(double)

}  // namespace polyssm::pipeline
