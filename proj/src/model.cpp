#include "polyssm/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "polyssm/ops.hpp"

namespace polyssm::model {

using polyssm::to_string;

std::size_t PatchConfig::tokens() const {
    validate();
    return (lookback - patch_len) / stride + 1;
}

void PatchConfig::validate() const {
    if (stride < 1 || patch_len < 1) throw std::invalid_argument("patch: patch_len and stride must be >= 1");
    if (stride > patch_len) {
        throw std::invalid_argument("patch: stride " + std::to_string(stride) + " exceeds patch_len " +
                                    std::to_string(patch_len));
    }
    if (lookback < patch_len) {
        throw std::invalid_argument("patch: lookback " + std::to_string(lookback) + " shorter than patch_len " +
                                    std::to_string(patch_len));
    }
}

void ModelConfig::validate() const {
    patch.validate();
    if (channels < 1 || d_model < 1 || d_inner < 1 || layers < 1 || horizon < 1 || conv_width < 1) {
        throw std::invalid_argument("model: channels, d_model, d_inner, layers, horizon and conv_width must be >= 1");
    }
    if (state < 3) throw std::invalid_argument("model: state size must be at least 3");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must lie in [0, 1)");
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {{"channels", cfg.channels},
            {"d_model", cfg.d_model},
            {"d_inner", cfg.d_inner},
            {"state", cfg.state},
            {"layers", cfg.layers},
            {"horizon", cfg.horizon},
            {"conv_width", cfg.conv_width},
            {"dropout", cfg.dropout},
            {"instance_norm", cfg.instance_norm},
            {"variant", polyops::to_string(cfg.variant)},
            {"patch_len", cfg.patch.patch_len},
            {"stride", cfg.patch.stride},
            {"lookback", cfg.patch.lookback}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.channels = j.at("channels").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_inner = j.at("d_inner").get<std::size_t>();
    c.state = j.at("state").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.horizon = j.at("horizon").get<std::size_t>();
    c.conv_width = j.at("conv_width").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.instance_norm = j.at("instance_norm").get<bool>();
    c.variant = polyops::parse_variant(j.at("variant").get<std::string>());
    c.patch.patch_len = j.at("patch_len").get<std::size_t>();
    c.patch.stride = j.at("stride").get<std::size_t>();
    c.patch.lookback = j.at("lookback").get<std::size_t>();
    c.validate();
    return c;
}

namespace {

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.storage()) v = T(u(rng));
    return t;
}

}  // namespace

template <class T>
BlockParams<T>::BlockParams(const ModelConfig& cfg, std::mt19937_64& rng)
    : norm_w("norm_w", Tensor<T>({cfg.d_model}, T{1})),
      in_w("in_w", uniform_tensor<T>({cfg.d_model, 2 * cfg.d_inner}, 1.0 / std::sqrt(double(cfg.d_model)), rng)),
      conv_w("conv_w", uniform_tensor<T>({cfg.d_inner, cfg.conv_width}, 1.0 / std::sqrt(double(cfg.conv_width)), rng)),
      conv_b("conv_b", uniform_tensor<T>({cfg.d_inner}, 1.0 / std::sqrt(double(cfg.conv_width)), rng)),
      ssm(cfg.d_inner, cfg.state, rng),
      poly(cfg.channels, cfg.state, cfg.variant),
      out_w("out_w", uniform_tensor<T>({cfg.d_inner, cfg.d_model}, 1.0 / std::sqrt(double(cfg.d_inner)), rng)) {}

template <class T>
std::vector<std::pair<std::string, Parameter<T>*>> BlockParams<T>::named_parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out{
        {"norm_w", &norm_w}, {"in_w", &in_w}, {"conv_w", &conv_w}, {"conv_b", &conv_b}};
    for (Parameter<T>* p : ssm.parameters()) out.emplace_back("ssm." + p->name, p);
    for (Parameter<T>* p : poly.parameters()) out.emplace_back("poly." + p->name, p);
    out.emplace_back("out_w", &out_w);
    return out;
}

template <class T>
Tensor<T> unfold_patches(const Tensor<T>& series, const PatchConfig& cfg) {
    if (series.rank() != 3) throw DimensionError("unfold_patches: expected [B, C, lookback], got " + to_string(series.shape()));
    if (series.shape()[2] != cfg.lookback) {
        throw DimensionError("unfold_patches: series length " + std::to_string(series.shape()[2]) +
                             " differs from lookback " + std::to_string(cfg.lookback));
    }
    const std::size_t L = cfg.tokens();
    const std::size_t rows = series.shape()[0] * series.shape()[1];
    const std::size_t P = cfg.patch_len, W = cfg.lookback;
    Tensor<T> out({series.shape()[0], series.shape()[1], L, P});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t p = 0; p < P; ++p) out[(r * L + l) * P + p] = series[r * W + l * cfg.stride + p];
    return out;
}

template <class T>
Var<T> patch_embed(Graph<T>& g, const Tensor<T>& series, const PatchConfig& cfg, Parameter<T>& w, Parameter<T>& b) {
    Var<T> patches = g.input(unfold_patches(series, cfg));
    return ops::add_trailing(ops::matmul(patches, g.param(w)), g.param(b));
}

template <class T>
Var<T> block_forward(Graph<T>& g, Var<T> tokens, BlockParams<T>& bp, const ModelConfig& cfg,
                     const ForwardOptions& opts) {
    const std::size_t Di = cfg.d_inner;
    Var<T> normed = ops::rms_norm(tokens, g.param(bp.norm_w));
    Var<T> proj = ops::matmul(normed, g.param(bp.in_w));
    Var<T> value = ops::slice(proj, -1, 0, Di);
    Var<T> gate = ops::slice(proj, -1, Di, 2 * Di);
    // [B, C, L, Di]; tokens run along axis 2
    value = ops::silu(ops::causal_conv1d(value, g.param(bp.conv_w), g.param(bp.conv_b), 2));

    auto sel = sscan::selectivize(value, g.param(bp.ssm.w_delta), g.param(bp.ssm.b_delta), g.param(bp.ssm.w_b),
                                  g.param(bp.ssm.w_c));
    Var<T> a_bar = sscan::discretize_decay(sel.delta, g.param(bp.ssm.a_log));
    Var<T> bx = sscan::discretize_drive(sel.delta, sel.b, value);
    Var<T> h = sscan::selective_scan(a_bar, bx, 2, opts.mode, opts.threads);  // [B, C, L, Di, N]
    if (opts.states != nullptr) opts.states->push_back(h.value().template cast<double>());

    h = polyops::fused_state_transform(h, bp.poly, g, 1);
    Var<T> y = sscan::readout(h, sel.c, value, g.param(bp.ssm.d_skip));
    y = ops::mul(y, ops::silu(gate));
    Var<T> out = ops::matmul(y, g.param(bp.out_w));
    if (opts.training && cfg.dropout > 0.0) {
        if (opts.rng == nullptr) throw std::invalid_argument("block_forward: training dropout needs an rng");
        out = ops::dropout(out, cfg.dropout, *opts.rng);
    }
    return ops::add(tokens, out);
}

template <class T>
InstanceStats<T> instance_stats(const Tensor<T>& series, T eps) {
    if (series.rank() != 3) throw DimensionError("instance_stats: expected [B, C, W], got " + to_string(series.shape()));
    const std::size_t B = series.shape()[0], C = series.shape()[1], W = series.shape()[2];
    InstanceStats<T> s{Tensor<T>({B, C}), Tensor<T>({B, C})};
    for (std::size_t r = 0; r < B * C; ++r) {
        double m = 0.0;
        for (std::size_t t = 0; t < W; ++t) m += series[r * W + t];
        m /= double(W);
        double v = 0.0;
        for (std::size_t t = 0; t < W; ++t) v += (series[r * W + t] - m) * (series[r * W + t] - m);
        v /= double(W);
        s.mean[r] = T(m);
        s.std[r] = T(std::sqrt(v + double(eps)));
    }
    return s;
}

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed)
    : embed_w("embed_w", Tensor<T>({cfg.patch.patch_len, cfg.d_model})),
      embed_b("embed_b", Tensor<T>({cfg.d_model})),
      norm_f("norm_f", Tensor<T>({cfg.d_model}, T{1})),
      head_w("head_w", Tensor<T>({cfg.patch.tokens() * cfg.d_model, cfg.horizon})),
      head_b("head_b", Tensor<T>({cfg.horizon})),
      cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    embed_w.value = uniform_tensor<T>(embed_w.value.shape(), 1.0 / std::sqrt(double(cfg.patch.patch_len)), rng);
    embed_b.value = uniform_tensor<T>(embed_b.value.shape(), 1.0 / std::sqrt(double(cfg.patch.patch_len)), rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) blocks.push_back(std::make_unique<BlockParams<T>>(cfg_, rng));
    const double hb = 1.0 / std::sqrt(double(head_w.value.shape()[0]));
    head_w.value = uniform_tensor<T>(head_w.value.shape(), hb, rng);
    head_b.value = uniform_tensor<T>(head_b.value.shape(), hb, rng);
}

template <class T>
Var<T> Model<T>::encode(Graph<T>& g, Var<T> tokens, const ForwardOptions& opts) {
    for (auto& b : blocks) tokens = block_forward(g, tokens, *b, cfg_, opts);
    return tokens;
}

template <class T>
Var<T> Model<T>::forward(Graph<T>& g, const Tensor<T>& series, const ForwardOptions& opts) {
    if (series.rank() != 3 || series.shape()[1] != cfg_.channels || series.shape()[2] != cfg_.patch.lookback) {
        throw DimensionError("forward: expected [B, " + std::to_string(cfg_.channels) + ", " +
                             std::to_string(cfg_.patch.lookback) + "], got " + to_string(series.shape()));
    }
    const std::size_t B = series.shape()[0], C = cfg_.channels, W = cfg_.patch.lookback, H = cfg_.horizon;
    Tensor<T> input = series;
    InstanceStats<T> stats;
    if (cfg_.instance_norm) {
        stats = instance_stats(series);
        for (std::size_t r = 0; r < B * C; ++r)
            for (std::size_t t = 0; t < W; ++t) input[r * W + t] = (series[r * W + t] - stats.mean[r]) / stats.std[r];
    }
    Var<T> x = patch_embed(g, input, cfg_.patch, embed_w, embed_b);
    x = encode(g, x, opts);
    x = ops::rms_norm(x, g.param(norm_f));
    if (opts.training && cfg_.dropout > 0.0) {
        if (opts.rng == nullptr) throw std::invalid_argument("forward: training dropout needs an rng");
        x = ops::dropout(x, cfg_.dropout, *opts.rng);
    }
    x = ops::reshape(x, {B, C, cfg_.patch.tokens() * cfg_.d_model});
    Var<T> pred = ops::add_trailing(ops::matmul(x, g.param(head_w)), g.param(head_b));
    if (cfg_.instance_norm) {
        Tensor<T> scale({B, C, H}), shift({B, C, H});
        for (std::size_t r = 0; r < B * C; ++r)
            for (std::size_t h = 0; h < H; ++h) {
                scale[r * H + h] = stats.std[r];
                shift[r * H + h] = stats.mean[r];
            }
        pred = ops::add(ops::mul(pred, g.input(std::move(scale))), g.input(std::move(shift)));
    }
    return pred;
}

template <class T>
Tensor<T> Model<T>::predict(const Tensor<T>& series, const ForwardOptions& opts) {
    Graph<T> g(false);
    ForwardOptions o = opts;
    o.training = false;
    return forward(g, series, o).value();
}

template <class T>
std::vector<std::pair<std::string, Parameter<T>*>> Model<T>::named_parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out{{"embed_w", &embed_w}, {"embed_b", &embed_b}};
    for (std::size_t i = 0; i < blocks.size(); ++i)
        for (auto& [name, p] : blocks[i]->named_parameters()) out.emplace_back("blocks." + std::to_string(i) + "." + name, p);
    out.emplace_back("norm_f", &norm_f);
    out.emplace_back("head_w", &head_w);
    out.emplace_back("head_b", &head_b);
    return out;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& np : named_parameters()) out.push_back(np.second);
    return out;
}

template <class T>
std::size_t Model<T>::parameter_count() {
    std::size_t n = 0;
    for (Parameter<T>* p : parameters()) n += p->value.numel();
    return n;
}

namespace {

void put_bytes(std::ostream& os, std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
    os.write(buf, bytes);
}

std::uint64_t get_bytes(std::istream& is, int bytes, const std::string& path) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), bytes)) throw std::runtime_error("checkpoint " + path + ": truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put_bytes(os, s.size(), 4);
    os.write(s.data(), std::streamsize(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
    const std::uint64_t n = get_bytes(is, 4, path);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), std::streamsize(n))) throw std::runtime_error("checkpoint " + path + ": truncated string");
    return s;
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    put_bytes(os, kCheckpointVersion, 4);
    put_string(os, file.header.dump());
    put_bytes(os, file.arrays.size(), 4);
    for (const NamedArray& a : file.arrays) {
        if (numel(a.shape) != a.values.size()) throw DimensionError("checkpoint array " + a.name + ": shape/data mismatch");
        put_string(os, a.name);
        put_bytes(os, a.dtype == DType::f32 ? 0 : 1, 1);
        put_bytes(os, a.shape.size(), 4);
        for (std::size_t d : a.shape) put_bytes(os, d, 8);
        for (double v : a.values) {
            if (a.dtype == DType::f32) {
                put_bytes(os, std::bit_cast<std::uint32_t>(float(v)), 4);
            } else {
                put_bytes(os, std::bit_cast<std::uint64_t>(v), 8);
            }
        }
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    }
    const std::uint64_t version = get_bytes(is, 4, path);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint " + path + ": unsupported version " + std::to_string(version));
    }
    CheckpointFile file;
    file.header = nlohmann::json::parse(get_string(is, path));
    const std::uint64_t count = get_bytes(is, 4, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = get_string(is, path);
        const std::uint64_t code = get_bytes(is, 1, path);
        if (code > 1) throw std::runtime_error("checkpoint " + path + ": unknown dtype code for " + a.name);
        a.dtype = code == 0 ? DType::f32 : DType::f64;
        const std::uint64_t rank = get_bytes(is, 4, path);
        for (std::uint64_t r = 0; r < rank; ++r) a.shape.push_back(get_bytes(is, 8, path));
        a.values.resize(numel(a.shape));
        for (double& v : a.values) {
            if (a.dtype == DType::f32) {
                v = std::bit_cast<float>(std::uint32_t(get_bytes(is, 4, path)));
            } else {
                v = std::bit_cast<double>(get_bytes(is, 8, path));
            }
        }
        file.arrays.push_back(std::move(a));
    }
    return file;
}

template <class T>
void save_model(const std::string& path, Model<T>& model, const nlohmann::json& extra) {
    CheckpointFile file;
    file.header = extra.is_object() ? extra : nlohmann::json::object();
    file.header["model"] = to_json(model.config());
    for (auto& [name, p] : model.named_parameters()) {
        NamedArray a;
        a.name = name;
        a.dtype = dtype_of<T>();
        a.shape = p->value.shape();
        a.values.assign(p->value.storage().begin(), p->value.storage().end());
        file.arrays.push_back(std::move(a));
    }
    write_checkpoint(path, file);
}

template <class T>
Model<T> load_model(const std::string& path, nlohmann::json* extra) {
    CheckpointFile file = read_checkpoint(path);
    if (!file.header.contains("model")) throw std::runtime_error("checkpoint " + path + ": header lacks a model config");
    Model<T> model(model_config_from_json(file.header["model"]), 0);
    auto named = model.named_parameters();
    if (named.size() != file.arrays.size()) {
        throw std::runtime_error("checkpoint " + path + ": holds " + std::to_string(file.arrays.size()) +
                                 " arrays, model expects " + std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        const NamedArray& a = file.arrays[i];
        Parameter<T>* p = named[i].second;
        if (a.name != named[i].first || a.shape != p->value.shape()) {
            throw std::runtime_error("checkpoint " + path + ": array " + a.name + " " + to_string(a.shape) +
                                     " does not match " + named[i].first + " " + to_string(p->value.shape()));
        }
        for (std::size_t k = 0; k < a.values.size(); ++k) p->value[k] = T(a.values[k]);
        p->zero_grad();
    }
    if (extra != nullptr) {
        *extra = file.header;
        extra->erase("model");
    }
    return model;
}

#define POLYSSM_INSTANTIATE_MODEL(T)                                                                        \
    template struct BlockParams<T>;                                                                         \
    template class Model<T>;                                                                                \
    template Tensor<T> unfold_patches(const Tensor<T>&, const PatchConfig&);                                \
    template Var<T> patch_embed(Graph<T>&, const Tensor<T>&, const PatchConfig&, Parameter<T>&, Parameter<T>&); \
    template Var<T> block_forward(Graph<T>&, Var<T>, BlockParams<T>&, const ModelConfig&, const ForwardOptions&); \
    template InstanceStats<T> instance_stats(const Tensor<T>&, T);                                          \
    template void save_model(const std::string&, Model<T>&, const nlohmann::json&);                         \
    template Model<T> load_model(const std::string&, nlohmann::json*);

POLYSSM_INSTANTIATE_MODEL(float)
POLYSSM_INSTANTIATE_MODEL(double)

}  // namespace polyssm::model
