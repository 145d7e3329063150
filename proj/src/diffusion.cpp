#include "dladiff/diffusion.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dladiff/rng.hpp"

namespace dladiff {

using ag::Var;

// ---------------------------------------------------------------------------
// Schedule

std::size_t NoiseSchedule::check(int t) const {
    if (t < 1 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return static_cast<std::size_t>(t - 1);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ParameterError("schedule needs T >= 1");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.alphas.reserve(betas.size());
    s.alpha_bars.reserve(betas.size());
    double prod = 1.0;
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) throw ParameterError("beta must lie in (0,1)");
        s.alphas.push_back(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bars.push_back(prod);
    }
    s.betas = std::move(betas);
    return s;
}

NoiseSchedule make_short_schedule(int T) {
    if (T < 1) throw ParameterError("schedule length must be >= 1");
    const double k = 1000.0 / T;
    return make_schedule(T, std::min(1e-4 * k, 0.5), std::min(0.02 * k, 0.999));
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ParameterError("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ParameterError("schedule needs 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(T);
    for (int i = 0; i < T; ++i)
        betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    return NoiseSchedule::from_betas(std::move(betas));
}

// ---------------------------------------------------------------------------
// Latents

LatentTensor::LatentTensor(Tensor hwd) : data_(std::move(hwd)) {
    if (data_.ndim() != 3) throw ShapeError("LatentTensor needs [h,w,d], got " + shape_str(data_.shape()));
    if (!all_finite(data_)) throw ParameterError("LatentTensor: non-finite value");
}

LatentTensor forward_noise(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape())
        throw ShapeError("forward_noise: " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = z0.tensor();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + b * eps.tensor()[i];
    return LatentTensor(std::move(out));
}

Var forward_noise(const Var& z0, int t, const Var& eps, const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape())
        throw ShapeError("forward_noise: " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    const double ab = sched.alpha_bar(t);
    return ag::add(ag::scale(z0, std::sqrt(ab)), ag::scale(eps, std::sqrt(1.0 - ab)));
}

namespace {

Eigen::MatrixXd dct_basis(int p, int c) {
    Eigen::MatrixXd d(p, p);  // d(u, x)
    for (int u = 0; u < p; ++u)
        for (int x = 0; x < p; ++x)
            d(u, x) = std::sqrt((u == 0 ? 1.0 : 2.0) / p) * std::cos(std::numbers::pi * (2 * x + 1) * u / (2.0 * p));
    Eigen::MatrixXd col = Eigen::MatrixXd::Identity(c, c);  // col(k, channel)
    if (c == 3) {
        col << 1 / std::sqrt(3.0), 1 / std::sqrt(3.0), 1 / std::sqrt(3.0),
               1 / std::sqrt(2.0), -1 / std::sqrt(2.0), 0.0,
               1 / std::sqrt(6.0), 1 / std::sqrt(6.0), -2 / std::sqrt(6.0);
    }
    const int n = p * p * c;
    Eigen::MatrixXd q(n, n);  // q(pixel, coefficient)
    for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
            for (int ch = 0; ch < c; ++ch)
                for (int u = 0; u < p; ++u)
                    for (int v = 0; v < p; ++v)
                        for (int k = 0; k < c; ++k)
                            q((y * p + x) * c + ch, (u * p + v) * c + k) = d(u, y) * d(v, x) * col(k, ch);
    return q;
}

}  // namespace

LatentCodec::LatentCodec(int patch, int channels, double gain, CodecBasis basis, std::uint64_t seed)
    : patch_(patch), channels_(channels), gain_(gain) {
    if (patch < 1 || channels < 1 || !(gain > 0.0)) throw ParameterError("LatentCodec: invalid configuration");
    const int n = latent_channels();
    Eigen::MatrixXd q;
    if (basis == CodecBasis::dct) {
        q = dct_basis(patch, channels);
    } else {
        auto rng = make_rng(seed, "codec");
        std::normal_distribution<double> nd;
        Eigen::MatrixXd m(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m(i, j) = nd(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
        q = qr.householderQ();
    }
    basis_ = Tensor({n, n});
    inverse_ = Tensor({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            basis_.at(i, j) = gain * q(i, j);
            inverse_.at(j, i) = q(i, j) / gain;
        }
}

Shape LatentCodec::latent_shape(int h, int w) const {
    if (h % patch_ || w % patch_)
        throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                         std::to_string(patch_));
    return {h / patch_, w / patch_, latent_channels()};
}

LatentTensor LatentCodec::encode(const ImageTensor& x) const {
    if (x.channels() != channels_) throw ShapeError("LatentCodec: channel mismatch");
    return LatentTensor(encode(ag::constant(x.tensor())).value());
}

Var LatentCodec::encode(const Var& x) const {
    if (x.shape().size() != 3 || x.shape()[2] != channels_)
        throw ShapeError("LatentCodec::encode expects [h,w," + std::to_string(channels_) + "], got " + shape_str(x.shape()));
    latent_shape(x.shape()[0], x.shape()[1]);
    return ag::matmul(ag::space_to_depth(x, patch_), ag::constant(basis_));
}

Tensor LatentCodec::decode_raw(const LatentTensor& z) const {
    const Shape& s = z.shape();
    if (s[2] != latent_channels()) throw ShapeError("LatentCodec: latent channel mismatch " + shape_str(s));
    Var patches = ag::matmul(ag::constant(z.tensor()), ag::constant(inverse_));
    return ag::depth_to_space(patches, patch_).value();
}

ImageTensor LatentCodec::decode(const LatentTensor& z) const { return ImageTensor(decode_raw(z)); }

Tensor LatentCodec::encode_adjoint(const LatentTensor& z) const {
    const Shape& s = z.shape();
    if (s[2] != latent_channels()) throw ShapeError("LatentCodec: latent channel mismatch " + shape_str(s));
    Var patches = ag::matmul(ag::constant(z.tensor()), ag::transpose(ag::constant(basis_)));
    return ag::depth_to_space(patches, patch_).value();
}

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer(int dim, std::uint64_t seed) : dim_(dim) {
    const char* words[] = {"<unk>", "a", "photo", "of", "person", "dslr", "portrait", "sks", "face", "picture"};
    for (int i = 0; i < static_cast<int>(std::size(words)); ++i) vocab_[words[i]] = i;
    auto rng = make_rng(seed, "token-table");
    table_ = Tensor::randn({static_cast<int>(vocab_.size()), dim}, rng, 1.0);
    constexpr int kMaxLen = 16;
    positions_ = Tensor({kMaxLen, dim});
    for (int p = 0; p < kMaxLen; ++p)
        for (int k = 0; k < dim; ++k) {
            const double f = std::pow(100.0, -static_cast<double>(k / 2 * 2) / dim);
            positions_.at(p, k) = 0.3 * (k % 2 == 0 ? std::sin(p * f) : std::cos(p * f));
        }
}

int Tokenizer::token_id(const std::string& word) const {
    auto it = vocab_.find(word);
    return it == vocab_.end() ? kUnknown : it->second;
}

TextCondition Tokenizer::encode(const std::string& prompt) const {
    TextCondition c;
    std::istringstream is(prompt);
    std::string w;
    while (is >> w) c.tokens.push_back(token_id(w));
    if (c.tokens.empty()) throw ParameterError("empty prompt");
    if (static_cast<int>(c.tokens.size()) > positions_.dim(0)) throw ParameterError("prompt too long");
    const int L = static_cast<int>(c.tokens.size());
    c.embeddings = Tensor({L, dim_});
    for (int i = 0; i < L; ++i) {
        if (c.tokens[i] == kTrigger && !c.trigger_index) c.trigger_index = i;
        for (int k = 0; k < dim_; ++k) c.embeddings.at(i, k) = table_.at(c.tokens[i], k) + positions_.at(i, k);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Weights

std::string to_string(WeightRole r) {
    switch (r) {
        case WeightRole::pretrained: return "pretrained";
        case WeightRole::static_surrogate: return "static_surrogate";
        case WeightRole::dynamic_surrogate: return "dynamic_surrogate";
        case WeightRole::attacker: return "attacker";
    }
    return "?";
}

WeightRole role_from_string(const std::string& s) {
    for (WeightRole r : {WeightRole::pretrained, WeightRole::static_surrogate, WeightRole::dynamic_surrogate,
                         WeightRole::attacker})
        if (to_string(r) == s) return r;
    throw FormatError("unknown weight role: " + s);
}

const std::vector<std::string>& lora_target_projections() {
    static const std::vector<std::string> names = {"mid.self.q",  "mid.self.k",  "mid.self.v",  "mid.self.o",
                                                   "mid.cross.q", "mid.cross.k", "mid.cross.v", "mid.cross.o"};
    return names;
}

namespace {

struct ParamSpec {
    Shape shape;
    enum Init { zero, one, fan_in, small } init;
};

std::map<std::string, ParamSpec> schema(const UNetConfig& c) {
    const int c1 = c.base_channels, c2 = c.mid_channels, th = c.time_hidden;
    std::map<std::string, ParamSpec> s;
    auto lin = [&](const std::string& n, int in, int out, bool bias = true) {
        s[n + ".w"] = {{in, out}, ParamSpec::fan_in};
        if (bias) s[n + ".b"] = {{out}, ParamSpec::zero};
    };
    auto norm = [&](const std::string& n, int ch) {
        s[n + ".g"] = {{ch}, ParamSpec::one};
        s[n + ".b"] = {{ch}, ParamSpec::zero};
    };
    auto res = [&](const std::string& n, int in, int out) {
        lin(n + ".conv1", 9 * in, out);
        lin(n + ".conv2", 9 * out, out);
        lin(n + ".temb", th, out);
        if (in != out) lin(n + ".skip", in, out, false);
    };
    auto attn = [&](const std::string& n, int ctx) {
        norm(n + ".norm", c2);
        lin(n + ".q", c2, c2, false);
        lin(n + ".k", ctx, c2, false);
        lin(n + ".v", ctx, c2, false);
        lin(n + ".o", c2, c2);
    };
    lin("time.l1", 2 * c.time_freqs, th);
    lin("time.l2", th, th);
    lin("in", c.latent_channels, c1);
    res("res1", c1, c1);
    lin("down", 4 * c1, c2);
    res("mid.res", c2, c2);
    attn("mid.self", c2);
    attn("mid.cross", c.text_dim);
    if (c.adapter) {
        lin("mid.adapter.proj", c.id_dim, c.id_tokens * c2);
        attn("mid.adapter", c2);
    }
    lin("up", c2, 4 * c1);
    res("res2", 2 * c1, c1);
    norm("out.norm", c1);
    lin("out", c1, c.latent_channels);
    s["out.w"].init = ParamSpec::small;
    s["precond.mean"] = {{c.latent_channels}, ParamSpec::zero};
    s["precond.std"] = {{c.latent_channels}, ParamSpec::one};
    return s;
}

bool is_lora_name(const std::string& n) {
    return n.ends_with(".lora_a") || n.ends_with(".lora_b");
}

}  // namespace

UNetWeights UNetWeights::init(const UNetConfig& cfg, std::uint64_t seed) {
    UNetWeights w;
    w.config = cfg;
    auto rng = make_rng(seed, "unet-init");
    for (const auto& [name, spec] : schema(cfg)) {
        Tensor t(spec.shape);
        switch (spec.init) {
            case ParamSpec::zero: break;
            case ParamSpec::one: t = Tensor(spec.shape, 1.0); break;
            case ParamSpec::fan_in: t = Tensor::randn(spec.shape, rng, std::sqrt(1.0 / spec.shape[0])); break;
            case ParamSpec::small: t = Tensor::randn(spec.shape, rng, 0.1 * std::sqrt(1.0 / spec.shape[0])); break;
        }
        w.params.emplace(name, std::move(t));
    }
    return w;
}

void UNetWeights::validate() const {
    const auto s = schema(config);
    for (const auto& [name, spec] : s) {
        auto it = params.find(name);
        if (it == params.end()) throw ShapeError("UNet weights missing parameter " + name);
        if (it->second.shape() != spec.shape)
            throw ShapeError("UNet parameter " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                             shape_str(spec.shape));
    }
    for (const auto& [name, t] : params) {
        if (s.count(name)) continue;
        if (!is_lora_name(name)) throw ShapeError("UNet weights carry unknown parameter " + name);
        const std::string base = name.substr(0, name.rfind('.'));
        const auto& targets = lora_target_projections();
        if (std::find(targets.begin(), targets.end(), base) == targets.end())
            throw ShapeError("LoRA factor on non-target projection " + name);
        const Shape& ws = s.at(base + ".w").shape;
        const bool is_a = name.ends_with(".lora_a");
        if (t.ndim() != 2 || (is_a ? t.dim(0) != ws[0] : t.dim(1) != ws[1]))
            throw ShapeError("LoRA factor " + name + " does not match " + base);
    }
}

bool UNetWeights::has_lora() const {
    return std::any_of(params.begin(), params.end(), [](const auto& kv) { return is_lora_name(kv.first); });
}

int UNetWeights::lora_rank() const {
    for (const auto& [n, t] : params)
        if (n.ends_with(".lora_a")) return t.dim(1);
    return 0;
}

std::size_t UNetWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : params) n += t.size();
    return n;
}

void UNetWeights::fit_preconditioner(std::span<const LatentTensor> latents) {
    const int lc = config.latent_channels;
    std::vector<double> s1(lc), s2(lc);
    std::size_t n = 0;
    for (const auto& z : latents) {
        if (z.shape().size() != 3 || z.shape()[2] != lc) throw ShapeError("fit_preconditioner: latent channel mismatch");
        const Tensor& v = z.tensor();
        for (std::size_t i = 0; i < v.size(); ++i) {
            s1[i % lc] += v[i];
            s2[i % lc] += v[i] * v[i];
        }
        n += v.size() / lc;
    }
    if (n < 2) throw ParameterError("fit_preconditioner: need at least two latent positions");
    Tensor& mean = params.at("precond.mean");
    Tensor& sd = params.at("precond.std");
    for (int k = 0; k < lc; ++k) {
        mean[k] = s1[k] / n;
        sd[k] = std::sqrt(std::max(s2[k] / n - mean[k] * mean[k], 1e-8));
    }
}

UNetWeights UNetWeights::without_adapter() const {
    UNetWeights w = *this;
    w.config.adapter = false;
    std::erase_if(w.params, [](const auto& kv) { return kv.first.starts_with("mid.adapter."); });
    return w;
}

UNetWeights UNetWeights::with_lora(int rank, std::uint64_t seed) const {
    if (rank < 1) throw ParameterError("LoRA rank must be >= 1");
    UNetWeights w = *this;
    auto rng = make_rng(seed, "lora-init");
    for (const auto& base : lora_target_projections()) {
        const Tensor& W = params.at(base + ".w");
        w.params[base + ".lora_a"] = Tensor::randn({W.dim(0), rank}, rng, std::sqrt(1.0 / W.dim(0)));
        w.params[base + ".lora_b"] = Tensor({rank, W.dim(1)});
    }
    return w;
}

Checkpoint UNetWeights::to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "unet";
    ck.meta["role"] = to_string(role);
    ck.meta["latent_channels"] = std::to_string(config.latent_channels);
    ck.meta["base_channels"] = std::to_string(config.base_channels);
    ck.meta["mid_channels"] = std::to_string(config.mid_channels);
    ck.meta["text_dim"] = std::to_string(config.text_dim);
    ck.meta["time_freqs"] = std::to_string(config.time_freqs);
    ck.meta["time_hidden"] = std::to_string(config.time_hidden);
    ck.meta["id_dim"] = std::to_string(config.id_dim);
    ck.meta["id_tokens"] = std::to_string(config.id_tokens);
    ck.meta["adapter"] = config.adapter ? "1" : "0";
    ck.meta["schedule_steps"] = std::to_string(config.schedule_steps);
    ck.tensors = params;
    return ck;
}

UNetWeights UNetWeights::from_checkpoint(const Checkpoint& ck) {
    auto it = ck.meta.find("kind");
    if (it == ck.meta.end() || it->second != "unet") throw FormatError("checkpoint is not a UNet");
    auto geti = [&](const char* k) {
        auto f = ck.meta.find(k);
        if (f == ck.meta.end()) throw FormatError(std::string("UNet checkpoint missing ") + k);
        return std::stoi(f->second);
    };
    UNetWeights w;
    w.config.latent_channels = geti("latent_channels");
    w.config.base_channels = geti("base_channels");
    w.config.mid_channels = geti("mid_channels");
    w.config.text_dim = geti("text_dim");
    w.config.time_freqs = geti("time_freqs");
    w.config.time_hidden = geti("time_hidden");
    w.config.id_dim = geti("id_dim");
    w.config.id_tokens = geti("id_tokens");
    w.config.adapter = geti("adapter") != 0;
    w.config.schedule_steps = geti("schedule_steps");
    w.role = role_from_string(ck.meta.at("role"));
    w.params = ck.tensors;
    w.validate();
    return w;
}

// ---------------------------------------------------------------------------
// Identity embedding

IdentityEmbedding::IdentityEmbedding(Tensor v) : v_(std::move(v)) {
    const double n = std::sqrt(sum_sq(v_));
    if (!(n > 0.0) || !std::isfinite(n)) throw ParameterError("IdentityEmbedding: zero or non-finite vector");
    v_ *= 1.0 / n;
    v_.reshape({static_cast<int>(v_.size())});
}

double cosine_similarity(const IdentityEmbedding& a, const IdentityEmbedding& b) {
    if (a.dim() != b.dim()) throw ShapeError("cosine_similarity: dimension mismatch");
    return dot(a.vector(), b.vector());
}

// ---------------------------------------------------------------------------
// Forward pass

UNetParams::UNetParams(const UNetWeights& w, Train train)
    : config_(w.config), schedule_(make_short_schedule(w.config.schedule_steps)) {
    w.validate();
    for (const auto& [name, t] : w.params) {
        const bool lora = is_lora_name(name);
        const bool stat = name.starts_with("precond.");
        const bool tr = !stat && (train == Train::all || (train == Train::lora_only && lora));
        vars_.emplace(name, Var(t, tr));
        if (tr) trainable_.push_back(name);
    }
}

const Var& UNetParams::operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ShapeError("UNet parameter not present: " + name);
    return it->second;
}

std::map<std::string, Tensor> UNetParams::grads() const {
    std::map<std::string, Tensor> g;
    for (const auto& n : trainable_) g.emplace(n, vars_.at(n).grad());
    return g;
}

namespace {

Var proj(const UNetParams& p, const std::string& n, const Var& x) {
    Var y = ag::matmul(x, p[n + ".w"]);
    if (p.has(n + ".lora_a")) y = ag::add(y, ag::matmul(ag::matmul(x, p[n + ".lora_a"]), p[n + ".lora_b"]));
    if (p.has(n + ".b")) y = ag::add_row(y, p[n + ".b"]);
    return y;
}

Var resblock(const UNetParams& p, const std::string& n, const Var& x, const Var& temb) {
    Var h = ag::conv3x3(ag::silu(x), p[n + ".conv1.w"], p[n + ".conv1.b"]);
    h = ag::add_row(h, proj(p, n + ".temb", temb));
    h = ag::conv3x3(ag::silu(h), p[n + ".conv2.w"], p[n + ".conv2.b"]);
    Var skip = p.has(n + ".skip.w") ? ag::matmul(x, p[n + ".skip.w"]) : x;
    return ag::add(skip, h);
}

struct AttnOut {
    Var out;
    Var probs;
};

AttnOut attention(const UNetParams& p, const std::string& n, const Var& tokens, const Var& ctx_or_null) {
    Var xq = ag::layer_norm(tokens, p[n + ".norm.g"], p[n + ".norm.b"]);
    Var ctx = ctx_or_null.defined() ? ctx_or_null : xq;
    Var q = proj(p, n + ".q", xq);
    Var k = proj(p, n + ".k", ctx);
    Var v = proj(p, n + ".v", ctx);
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
    Var probs = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), inv));
    return {proj(p, n + ".o", ag::matmul(probs, v)), probs};
}

Tensor time_features(int t, int freqs) {
    Tensor f({1, 2 * freqs});
    for (int i = 0; i < freqs; ++i) {
        const double w = std::exp(-std::log(1000.0) * i / freqs);
        f[i] = std::sin(t * w);
        f[freqs + i] = std::cos(t * w);
    }
    return f;
}

void precond_coefficients(const UNetParams& p, int t, Tensor& centre, Tensor& c_in, Tensor& c_skip, Tensor& c_out) {
    const UNetConfig& c = p.config();
    if (t < 1 || t > c.schedule_steps) throw ParameterError("unet: timestep outside the preconditioned schedule");
    const double ab = p.alpha_bar(t);
    const int lc = c.latent_channels;
    centre = c_in = c_skip = c_out = Tensor({lc});
    for (int k = 0; k < lc; ++k) {
        const double mu = p["precond.mean"].value()[k], sd = p["precond.std"].value()[k];
        const double var = ab * sd * sd + (1.0 - ab);
        centre[k] = -std::sqrt(ab) * mu;
        c_in[k] = 1.0 / std::sqrt(var);
        c_skip[k] = std::sqrt(1.0 - ab) / var;
        c_out[k] = std::sqrt(ab) * sd / std::sqrt(var);
    }
}

}  // namespace

Tensor precond_output_scale(const UNetParams& p, int t) {
    Tensor centre, c_in, c_skip, c_out;
    precond_coefficients(p, t, centre, c_in, c_skip, c_out);
    return c_out;
}

UNetGraph unet_forward(const UNetParams& p, const Var& z_t, int t, const TextCondition& cond, const Var& id_embed) {
    const UNetConfig& c = p.config();
    const Shape& zs = z_t.shape();
    if (zs.size() != 3 || zs[2] != c.latent_channels || zs[0] % 2 || zs[1] % 2)
        throw ShapeError("unet: latent shape " + shape_str(zs) + " incompatible with config");
    if (cond.embeddings.ndim() != 2 || cond.embeddings.dim(1) != c.text_dim)
        throw ShapeError("unet: text embedding width mismatch");
    if (id_embed.defined() && !c.adapter) throw ConfigError("identity embedding given but adapter block is absent");
    const int h = zs[0], w = zs[1];

    Var temb = ag::constant(time_features(t, c.time_freqs));
    temb = ag::silu(proj(p, "time.l1", temb));
    temb = ag::silu(proj(p, "time.l2", temb));

    Tensor centre, c_in, c_skip, c_out;
    precond_coefficients(p, t, centre, c_in, c_skip, c_out);
    const Var zc = ag::add_row(z_t, ag::constant(centre));

    Var h0 = proj(p, "in", ag::mul_row(zc, ag::constant(c_in)));
    Var h1 = resblock(p, "res1", h0, temb);
    Var d = proj(p, "down", ag::space_to_depth(h1, 2));
    Var m = resblock(p, "mid.res", d, temb);

    const int n = (h / 2) * (w / 2);
    Var tokens = ag::reshape(m, {n, c.mid_channels});
    AttnOut sa = attention(p, "mid.self", tokens, Var());
    tokens = ag::add(tokens, sa.out);
    AttnOut ca = attention(p, "mid.cross", tokens, ag::constant(cond.embeddings));
    tokens = ag::add(tokens, ca.out);
    if (id_embed.defined()) {
        if (static_cast<int>(id_embed.value().size()) != c.id_dim) throw ShapeError("unet: identity embedding width");
        Var idt = proj(p, "mid.adapter.proj", ag::reshape(id_embed, {1, c.id_dim}));
        idt = ag::reshape(idt, {c.id_tokens, c.mid_channels});
        AttnOut ia = attention(p, "mid.adapter", tokens, idt);
        tokens = ag::add(tokens, ia.out);
    }
    Var m2 = ag::reshape(tokens, {h / 2, w / 2, c.mid_channels});
    Var u = ag::depth_to_space(proj(p, "up", m2), 2);
    Var r2 = resblock(p, "res2", ag::concat_cols(u, h1), temb);
    Var o = ag::silu(ag::layer_norm(r2, p["out.norm.g"], p["out.norm.b"]));
    Var eps = ag::add(ag::mul_row(zc, ag::constant(c_skip)), ag::mul_row(proj(p, "out", o), ag::constant(c_out)));
    return {eps, ca.probs, sa.probs};
}

UNetOutput unet_predict(const UNetWeights& w, const LatentTensor& z_t, int t, const TextCondition& cond,
                        const IdentityEmbedding* id_embed, bool capture) {
    UNetParams p(w, UNetParams::Train::none);
    Var id = id_embed ? ag::constant(id_embed->vector()) : Var();
    UNetGraph g = unet_forward(p, ag::constant(z_t.tensor()), t, cond, id);
    UNetOutput out{LatentTensor(g.eps_hat.value()), std::nullopt};
    if (capture) out.maps = AttentionCapture{"mid", t, g.cross_attn.value(), g.self_attn.value()};
    return out;
}

// ---------------------------------------------------------------------------
// Losses

NoisePredictor unet_predictor(const UNetWeights& w) {
    return [p = std::make_shared<UNetParams>(w, UNetParams::Train::none)](const Tensor& z, int t,
                                                                           const TextCondition& c) {
        return unet_forward(*p, ag::constant(z), t, c, Var()).eps_hat.value();
    };
}

double loss_cond(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentTensor& z0, int t,
                 const LatentTensor& eps, const TextCondition& cond) {
    LatentTensor zt = forward_noise(z0, t, eps, sched);
    Tensor eh = predictor(zt.tensor(), t, cond);
    if (eh.size() != eps.tensor().size()) throw ShapeError("predictor output shape mismatch");
    return sum_sq(eps.tensor() - eh);
}

double loss_cond(const UNetWeights& w, const NoiseSchedule& sched, const LatentTensor& z0, int t,
                 const LatentTensor& eps, const TextCondition& cond) {
    return loss_cond(unet_predictor(w), sched, z0, t, eps, cond);
}

Var loss_cond(const UNetParams& p, const NoiseSchedule& sched, const Var& z0, int t, const Var& eps,
              const TextCondition& cond) {
    Var zt = forward_noise(z0, t, eps, sched);
    return ag::sum_sq(ag::sub(eps, unet_forward(p, zt, t, cond, Var()).eps_hat));
}

double loss_db(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentTensor& z0,
               const TextCondition& cond_trigger, const NoiseDraw& draw, const PriorPair* prior,
               const NoiseDraw* prior_draw, double lambda) {
    if (lambda < 0.0) throw ParameterError("lambda must be >= 0");
    double l = loss_cond(predictor, sched, z0, draw.t, draw.eps, cond_trigger);
    if (lambda == 0.0) return l;
    if (!prior || !prior_draw) throw ConfigError("prior-preservation term needs a prior pair when lambda > 0");
    return l + lambda * loss_cond(predictor, sched, prior->z0, prior_draw->t, prior_draw->eps, prior->cond);
}

double loss_db(const UNetWeights& w, const NoiseSchedule& sched, const LatentTensor& z0,
               const TextCondition& cond_trigger, const NoiseDraw& draw, const PriorPair* prior,
               const NoiseDraw* prior_draw, double lambda) {
    return loss_db(unet_predictor(w), sched, z0, cond_trigger, draw, prior, prior_draw, lambda);
}

NoiseDraw draw_noise(const NoiseSchedule& sched, const Shape& latent_shape, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> ut(1, sched.T);
    NoiseDraw d;
    d.t = ut(rng);
    d.eps = LatentTensor(Tensor::randn(latent_shape, rng));
    return d;
}

// ---------------------------------------------------------------------------
// Sampling

ImageTensor sample(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentCodec& codec,
                   const TextCondition& cond, int steps, std::uint64_t seed, int image_size) {
    if (steps < 0 || steps > sched.T) throw ParameterError("sample: steps must lie in [0, T]");
    auto rng = make_rng(seed, "sample");
    const Shape ls = codec.latent_shape(image_size, image_size);
    Tensor z = Tensor::randn(ls, rng);
    if (steps == 0) return codec.decode(LatentTensor(z));

    std::vector<int> ts(steps);
    for (int k = 0; k < steps; ++k)
        ts[k] = steps == 1 ? sched.T
                           : 1 + static_cast<int>(std::lround(static_cast<double>(k) * (sched.T - 1) / (steps - 1)));

    std::normal_distribution<double> nd;
    for (int k = steps - 1; k >= 0; --k) {
        const int t = ts[k];
        const double ab = sched.alpha_bar(t);
        const double ab_prev = k > 0 ? sched.alpha_bar(ts[k - 1]) : 1.0;
        const double beta = 1.0 - ab / ab_prev;
        const Tensor eps = predictor(z, t, cond);
        // x0 estimate, clipped to the valid image box through the codec.
        Tensor x0 = z;
        for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (z[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
        x0 = codec.encode(ImageTensor(codec.decode_raw(LatentTensor(x0)))).tensor();
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = c0 * x0[i] + ct * z[i];
        if (k > 0) {
            const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
            for (double& v : z.values()) v += sigma * nd(rng);
        }
    }
    return codec.decode(LatentTensor(z));
}

ImageTensor sample(const UNetWeights& w, const NoiseSchedule& sched, const LatentCodec& codec,
                   const TextCondition& cond, const IdentityEmbedding* id_embed, int steps, std::uint64_t seed,
                   int image_size) {
    auto p = std::make_shared<UNetParams>(w, UNetParams::Train::none);
    Var id = id_embed ? ag::constant(id_embed->vector()) : Var();
    NoisePredictor pred = [p, id](const Tensor& z, int t, const TextCondition& c) {
        return unet_forward(*p, ag::constant(z), t, c, id).eps_hat.value();
    };
    return sample(pred, sched, codec, cond, steps, seed, image_size);
}

}  // namespace dladiff
