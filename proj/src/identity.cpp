#include "dladiff/identity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "dladiff/face.hpp"
#include "dladiff/optim.hpp"
#include "dladiff/rng.hpp"

namespace dladiff {

namespace {

constexpr double kFrame = 112.0;
constexpr double kPi = 3.14159265358979323846;
constexpr Point2 kPoseCentre{56.0, 66.0};

double u01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
double urange(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * u01(rng); }

Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}
Rgb scaled(const Rgb& c, double s) { return {c.r * s, c.g * s, c.b * s}; }
Rgb jittered(const Rgb& c, std::mt19937_64& rng, double amount) {
    auto j = [&](double v) { return std::clamp(v + urange(rng, -amount, amount), 0.0, 1.0); };
    return {j(c.r), j(c.g), j(c.b)};
}

double sq(double v) { return v * v; }

// Colour of the unposed face at template-frame point q, or nullopt for
// background.
std::optional<Rgb> face_colour(const FaceGeometry& g, Point2 q) {
    const double fx = (q.x - g.face_cx) / g.face_rx;
    const double fy = (q.y - g.face_cy) / g.face_ry;
    const bool in_face = fx * fx + fy * fy < 1.0;
    const double hx = (q.x - g.face_cx) / (g.face_rx + 6.0);
    const double hy = (q.y - g.face_cy + 6.0) / (g.face_ry + 6.0);
    const bool in_hair = hx * hx + hy * hy < 1.0 && q.y < g.face_cy + 0.2 * g.face_ry;

    if (!in_face) {
        if (in_hair) return g.hair;
        return std::nullopt;
    }
    if (q.y < g.hair_line + 8.0 * fx * fx) return g.hair;

    for (double side : {-1.0, 1.0}) {
        const double ex = g.face_cx + side * g.eye_half_spacing;
        const double by = g.eye_y - g.brow_gap;
        if (std::abs(q.y - by) < 0.5 * g.brow_thickness && std::abs(q.x - ex) < g.brow_half_len)
            return scaled(g.hair, 0.8);
        const double e = sq((q.x - ex) / g.eye_rx) + sq((q.y - g.eye_y) / g.eye_ry);
        if (e < 1.0) {
            const double r = std::hypot(q.x - ex, q.y - g.eye_y);
            if (r < 0.4 * g.iris_r) return Rgb{0.05, 0.05, 0.05};
            if (r < g.iris_r) return g.iris;
            return Rgb{0.94, 0.94, 0.92};
        }
    }
    const double mouth = sq((q.x - g.face_cx) / g.mouth_half_w) + sq((q.y - g.mouth_y) / g.mouth_h);
    if (mouth < 1.0) return g.lip;
    const double top = g.nose_y - g.nose_len;
    if (q.y > top && q.y < g.nose_y) {
        const double half = g.nose_half_w * (q.y - top) / g.nose_len;
        if (std::abs(q.x - g.face_cx) < half) return scaled(g.skin, 0.8);
    }
    return g.skin;
}

Point2 unpose(const PoseParams& pose, Point2 u) {
    const double c = std::cos(pose.rotation), s = std::sin(pose.rotation);
    const double dx = (u.x - kPoseCentre.x - pose.tx) / pose.scale;
    const double dy = (u.y - kPoseCentre.y - pose.ty) / pose.scale;
    return {kPoseCentre.x + c * dx + s * dy, kPoseCentre.y - s * dx + c * dy};
}

}  // namespace

Landmarks SyntheticIdentity::canonical_landmarks() const {
    const FaceGeometry& g = geometry;
    return {Point2{g.face_cx - g.eye_half_spacing, g.eye_y}, Point2{g.face_cx + g.eye_half_spacing, g.eye_y},
            Point2{g.face_cx, g.nose_y}, Point2{g.face_cx - g.mouth_half_w, g.mouth_y},
            Point2{g.face_cx + g.mouth_half_w, g.mouth_y}};
}

SyntheticIdentity make_identity(int id, std::uint64_t seed) {
    auto rng = make_rng(seed, "identity", static_cast<std::uint64_t>(id));
    FaceGeometry g;
    g.face_rx = urange(rng, 31, 39);
    g.face_ry = urange(rng, 41, 48);
    g.hair_line = urange(rng, 26, 40);
    g.eye_y = 51.6 + urange(rng, -3, 3);
    g.eye_half_spacing = 17.6 + urange(rng, -3, 3);
    g.eye_rx = urange(rng, 6, 8.5);
    g.eye_ry = urange(rng, 3, 4.5);
    g.iris_r = urange(rng, 2.5, 3.5);
    g.brow_gap = urange(rng, 7, 11);
    g.brow_half_len = urange(rng, 6, 10);
    g.brow_thickness = urange(rng, 2, 4);
    g.nose_y = 71.7 + urange(rng, -3, 3);
    g.nose_len = urange(rng, 12, 18);
    g.nose_half_w = urange(rng, 4, 7);
    g.mouth_y = 92.3 + urange(rng, -3, 3);
    g.mouth_half_w = 14.6 + urange(rng, -3, 3);
    g.mouth_h = urange(rng, 2.5, 5);

    g.skin = jittered(mix(Rgb{0.42, 0.28, 0.2}, Rgb{0.97, 0.84, 0.74}, u01(rng)), rng, 0.04);
    static const Rgb kHair[] = {{0.08, 0.06, 0.05}, {0.35, 0.2, 0.1},  {0.8, 0.65, 0.35},
                                {0.6, 0.22, 0.1},   {0.65, 0.65, 0.65}, {0.2, 0.15, 0.3}};
    g.hair = jittered(kHair[std::uniform_int_distribution<int>(0, 5)(rng)], rng, 0.08);
    const double hue = urange(rng, 0.0, 2 * kPi);
    g.iris = Rgb{0.35 + 0.25 * std::cos(hue), 0.35 + 0.25 * std::cos(hue + 2.1), 0.35 + 0.25 * std::cos(hue + 4.2)};
    g.lip = jittered(Rgb{0.72, 0.3, 0.32}, rng, 0.12);
    return {id, g};
}

PoseParams make_pose(int id, int pose_index, std::uint64_t seed) {
    auto rng = make_rng(derive_seed(seed, "pose", static_cast<std::uint64_t>(id)), "pose",
                        static_cast<std::uint64_t>(pose_index));
    PoseParams p;
    p.rotation = urange(rng, -8.0, 8.0) * kPi / 180.0;
    p.scale = urange(rng, 0.92, 1.08);
    p.tx = urange(rng, -4, 4);
    p.ty = urange(rng, -4, 4);
    p.brightness = urange(rng, 0.85, 1.15);
    p.gradient = urange(rng, -0.15, 0.15);
    const double base = urange(rng, 0.25, 0.75);
    p.background = jittered(Rgb{base, base, base}, rng, 0.12);
    return p;
}

Point2 apply_pose(const PoseParams& pose, Point2 q) {
    const double c = std::cos(pose.rotation), s = std::sin(pose.rotation);
    const double dx = q.x - kPoseCentre.x, dy = q.y - kPoseCentre.y;
    return {kPoseCentre.x + pose.tx + pose.scale * (c * dx - s * dy),
            kPoseCentre.y + pose.ty + pose.scale * (s * dx + c * dy)};
}

Landmarks posed_landmarks(const SyntheticIdentity& ident, const PoseParams& pose, int resolution) {
    Landmarks out = ident.canonical_landmarks();
    const double k = resolution / kFrame;
    for (auto& p : out) {
        const Point2 u = apply_pose(pose, p);
        p = {u.x * k, u.y * k};
    }
    return out;
}

ImageTensor render_face(const SyntheticIdentity& ident, const PoseParams& pose, int resolution) {
    if (resolution < 8) throw ParameterError("render_face: resolution too small");
    const int ss = resolution <= 48 ? 4 : 2;
    const double k = kFrame / resolution;
    Tensor img({resolution, resolution, 3});
    for (int i = 0; i < resolution; ++i)
        for (int j = 0; j < resolution; ++j) {
            double acc[3] = {0, 0, 0};
            for (int a = 0; a < ss; ++a)
                for (int b = 0; b < ss; ++b) {
                    const Point2 u{(j + (b + 0.5) / ss) * k, (i + (a + 0.5) / ss) * k};
                    const auto c = face_colour(ident.geometry, unpose(pose, u));
                    const Rgb col = c ? *c : pose.background;
                    const double light = pose.brightness + pose.gradient * (u.x / kFrame - 0.5);
                    acc[0] += col.r * light;
                    acc[1] += col.g * light;
                    acc[2] += col.b * light;
                }
            for (int ch = 0; ch < 3; ++ch)
                img[(static_cast<std::size_t>(i) * resolution + j) * 3 + ch] = acc[ch] / (ss * ss);
        }
    return ImageTensor(std::move(img)).quantized();
}

std::vector<const FaceSample*> FaceDataset::of_identity(int id) const {
    std::vector<const FaceSample*> out;
    for (const auto& s : samples)
        if (s.identity == id) out.push_back(&s);
    return out;
}

FaceDataset generate_identity_set(int num_ids, int imgs_per_id, std::uint64_t seed, int first_id) {
    if (num_ids < 2) throw ParameterError("generate_identity_set: need at least two identities");
    if (imgs_per_id < 1) throw ParameterError("generate_identity_set: imgs_per_id must be >= 1");
    FaceDataset ds;
    ds.seed = seed;
    for (int k = 0; k < num_ids; ++k) {
        const SyntheticIdentity ident = make_identity(first_id + k, seed);
        ds.identities.push_back(ident);
        for (int p = 0; p < imgs_per_id; ++p) {
            FaceSample s;
            s.identity = ident.id;
            s.pose_index = p;
            s.pose = make_pose(ident.id, p, seed);
            s.image32 = render_face(ident, s.pose, 32);
            s.landmarks32 = posed_landmarks(ident, s.pose, 32);
            s.image112 = render_face(ident, s.pose, 112);
            s.landmarks112 = posed_landmarks(ident, s.pose, 112);
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

Landmarks canonical_landmarks(int resolution) {
    SyntheticIdentity mean;
    Landmarks out = mean.canonical_landmarks();
    for (auto& p : out) p = {p.x * resolution / kFrame, p.y * resolution / kFrame};
    return out;
}

namespace {

std::string image_name(int id, int pose, int res) {
    return "id" + std::to_string(id) + "_" + std::to_string(pose) + "_" + std::to_string(res) + ".png";
}

}  // namespace

void save_dataset(const FaceDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream lm(dir / "landmarks.txt");
    if (!lm) throw std::runtime_error("cannot write " + (dir / "landmarks.txt").string());
    lm << "# id pose res rotation scale tx ty lx1 ly1 lx2 ly2 lx3 ly3 lx4 ly4 lx5 ly5\n";
    lm << "# seed " << ds.seed << "\n";
    for (const auto& s : ds.samples) {
        for (int res : {32, 112}) {
            const ImageTensor& img = res == 32 ? s.image32 : s.image112;
            if (img.tensor().empty()) continue;
            const Landmarks& l = res == 32 ? s.landmarks32 : s.landmarks112;
            write_png(dir / image_name(s.identity, s.pose_index, res), img);
            lm << s.identity << ' ' << s.pose_index << ' ' << res << ' ' << format_double(s.pose.rotation) << ' '
               << format_double(s.pose.scale) << ' ' << format_double(s.pose.tx) << ' ' << format_double(s.pose.ty);
            for (const auto& p : l) lm << ' ' << format_double(p.x) << ' ' << format_double(p.y);
            lm << '\n';
        }
    }
    if (!lm) throw std::runtime_error("write failed: landmarks.txt");
}

FaceDataset load_dataset(const std::filesystem::path& dir, bool require_both) {
    std::ifstream is(dir / "landmarks.txt");
    if (!is) throw std::runtime_error("cannot open " + (dir / "landmarks.txt").string());
    FaceDataset ds;
    std::map<std::pair<int, int>, FaceSample> by_key;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hs(line.substr(1));
            std::string word;
            if (hs >> word && word == "seed") hs >> ds.seed;
            continue;
        }
        std::istringstream ls(line);
        int id = 0, pose = 0, res = 0;
        PoseParams pp;
        Landmarks l;
        ls >> id >> pose >> res >> pp.rotation >> pp.scale >> pp.tx >> pp.ty;
        for (auto& p : l) ls >> p.x >> p.y;
        if (!ls || (res != 32 && res != 112))
            throw FormatError("landmarks.txt line " + std::to_string(lineno) + ": malformed record");
        FaceSample& s = by_key[{id, pose}];
        s.identity = id;
        s.pose_index = pose;
        s.pose.rotation = pp.rotation;
        s.pose.scale = pp.scale;
        s.pose.tx = pp.tx;
        s.pose.ty = pp.ty;
        const ImageTensor img = read_png(dir / image_name(id, pose, res));
        if (img.height() != res || img.width() != res || img.channels() != 3)
            throw FormatError("unexpected image size for " + image_name(id, pose, res));
        if (res == 32) {
            s.image32 = img;
            s.landmarks32 = l;
        } else {
            s.image112 = img;
            s.landmarks112 = l;
        }
    }
    int last_id = -1;
    for (auto& [key, s] : by_key) {
        if (s.image32.tensor().empty() || (require_both && s.image112.tensor().empty()))
            throw FormatError("dataset sample missing a rendition: id " + std::to_string(key.first));
        if (key.first != last_id) {
            ds.identities.push_back(SyntheticIdentity{key.first, {}});
            last_id = key.first;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Encoders

std::string to_string(EncoderArch a) {
    switch (a) {
    case EncoderArch::shallow: return "shallow";
    case EncoderArch::deep: return "deep";
    case EncoderArch::heldout: return "heldout";
    }
    return "?";
}

EncoderArch encoder_arch_from_string(const std::string& s) {
    if (s == "shallow") return EncoderArch::shallow;
    if (s == "deep") return EncoderArch::deep;
    if (s == "heldout") return EncoderArch::heldout;
    throw ParameterError("unknown encoder architecture: " + s);
}

std::vector<EncoderSpec> default_encoder_specs() {
    return {{"ie1", EncoderArch::shallow, 32, false},
            {"ie2", EncoderArch::deep, 32, false},
            {"ie3", EncoderArch::heldout, 32, true}};
}

namespace {

// Stage list: positive = conv3x3 with that many output channels, negative =
// average pooling with factor -v. Every pyramid ends at 7 x 7 x 32.
std::vector<int> stages(EncoderArch a) {
    switch (a) {
    case EncoderArch::shallow: return {8, -4, 16, -2, 32, -2};
    case EncoderArch::deep: return {8, -2, 12, -2, 24, 24, -2, 32, -2};
    case EncoderArch::heldout: return {6, -2, 8, -2, 16, -2, 32, -2};
    }
    return {};
}

constexpr int kFeatureDim = 64;
constexpr int kFinalSide = 7;
constexpr int kFinalChannels = 32;

}  // namespace

EncoderWeights EncoderWeights::init(const EncoderSpec& spec, std::uint64_t seed) {
    if (spec.dim < 2) throw ParameterError("encoder dim must be >= 2");
    auto rng = make_rng(seed, "encoder-init");
    EncoderWeights w;
    w.spec = spec;
    int cin = 3, conv = 0;
    for (int st : stages(spec.arch)) {
        if (st < 0) continue;
        const std::string n = "conv" + std::to_string(conv++);
        w.params[n + ".w"] = Tensor::randn({9 * cin, st}, rng, std::sqrt(2.0 / (9 * cin)));
        w.params[n + ".b"] = Tensor::zeros({st});
        cin = st;
    }
    const int flat = kFinalSide * kFinalSide * kFinalChannels;
    w.params["fc1.w"] = Tensor::randn({flat, kFeatureDim}, rng, std::sqrt(2.0 / flat));
    w.params["fc1.b"] = Tensor::zeros({kFeatureDim});
    w.params["fc2.w"] = Tensor::randn({kFeatureDim, spec.dim}, rng, std::sqrt(1.0 / kFeatureDim));
    w.params["fc2.b"] = Tensor::zeros({spec.dim});
    return w;
}

Checkpoint EncoderWeights::to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "encoder";
    ck.meta["id"] = spec.id;
    ck.meta["arch"] = to_string(spec.arch);
    ck.meta["dim"] = std::to_string(spec.dim);
    ck.meta["held_out"] = spec.held_out ? "1" : "0";
    ck.tensors = params;
    return ck;
}

EncoderWeights EncoderWeights::from_checkpoint(const Checkpoint& ck) {
    auto get = [&](const char* k) -> const std::string& {
        auto it = ck.meta.find(k);
        if (it == ck.meta.end()) throw FormatError(std::string("encoder checkpoint missing meta ") + k);
        return it->second;
    };
    if (get("kind") != "encoder") throw FormatError("checkpoint is not an encoder");
    EncoderSpec spec{get("id"), encoder_arch_from_string(get("arch")), std::stoi(get("dim")), get("held_out") == "1"};
    EncoderWeights w = init(spec, 0);
    for (auto& [name, t] : w.params) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) throw FormatError("encoder checkpoint missing " + name);
        if (!it->second.same_shape(t)) throw FormatError("encoder checkpoint shape mismatch for " + name);
        t = it->second;
    }
    return w;
}

namespace {

EncoderGraph forward_with(const EncoderSpec& spec, const std::map<std::string, ag::Var>& p, const ag::Var& crop) {
    if (crop.shape() != Shape{kCropSize, kCropSize, 3})
        throw ShapeError("encoder expects a 112x112x3 crop, got " + shape_str(crop.shape()));
    ag::Var h = ag::scale(ag::add_scalar(crop, -0.5), 2.0);
    int conv = 0;
    for (int st : stages(spec.arch)) {
        if (st < 0) {
            h = ag::avg_pool(h, -st);
        } else {
            const std::string n = "conv" + std::to_string(conv++);
            h = ag::relu(ag::conv3x3(h, p.at(n + ".w"), p.at(n + ".b")));
        }
    }
    h = ag::reshape(h, {1, kFinalSide * kFinalSide * kFinalChannels});
    ag::Var feat = ag::relu(ag::linear(h, p.at("fc1.w"), p.at("fc1.b")));
    ag::Var e = ag::linear(feat, p.at("fc2.w"), p.at("fc2.b"));
    e = ag::l2_normalize(ag::reshape(e, {spec.dim}));
    return {e, feat};
}

std::map<std::string, ag::Var> lift(const EncoderWeights& w, bool trainable) {
    std::map<std::string, ag::Var> out;
    for (const auto& [n, t] : w.params) out.emplace(n, ag::Var(t, trainable));
    return out;
}

}  // namespace

EncoderGraph encoder_forward(const EncoderWeights& w, const ag::Var& crop) {
    return forward_with(w.spec, lift(w, false), crop);
}

IdentityEmbedding encode(const EncoderWeights& w, const ImageTensor& crop) {
    return IdentityEmbedding(encoder_forward(w, ag::constant(crop.tensor())).embedding.value());
}

Tensor encoder_features(const EncoderWeights& w, const ImageTensor& crop) {
    return encoder_forward(w, ag::constant(crop.tensor())).features.value().reshaped({kFeatureDim});
}

std::array<ImageTensor, 2> aligned_crops(const FaceSample& s) {
    return {align_face(s.image112, s.landmarks112).crop, align_face(s.image32, s.landmarks32).crop};
}

EncoderWeights train_encoder(const EncoderSpec& spec, const FaceDataset& ds, const EncoderTrainConfig& cfg) {
    if (cfg.steps < 0 || cfg.batch_size < 1 || !(cfg.learning_rate > 0))
        throw ParameterError("train_encoder: invalid configuration");
    std::map<int, int> label_of;
    for (const auto& ident : ds.identities) label_of.emplace(ident.id, static_cast<int>(label_of.size()));
    for (const auto& s : ds.samples) label_of.emplace(s.identity, static_cast<int>(label_of.size()));
    if (label_of.size() < 2) throw TrainingError("train_encoder: dataset needs at least two identities");
    const int n_cls = static_cast<int>(label_of.size());

    // Source images with landmarks; both renditions of each sample.
    struct Item {
        const ImageTensor* img;
        const Landmarks* lm;
        int label;
    };
    std::vector<Item> items;
    for (const auto& s : ds.samples) {
        const int lab = label_of.at(s.identity);
        items.push_back({&s.image112, &s.landmarks112, lab});
        items.push_back({&s.image32, &s.landmarks32, lab});
    }

    EncoderWeights w = EncoderWeights::init(spec, derive_seed(cfg.seed, "encoder", fnv1a64(spec.id.data(), spec.id.size())));
    auto rng = make_rng(cfg.seed, "encoder-train", fnv1a64(spec.id.data(), spec.id.size()));
    Tensor head = Tensor::randn({spec.dim, n_cls}, rng);
    auto normalize_cols = [&](Tensor& h) {
        for (int c = 0; c < n_cls; ++c) {
            double n = 0;
            for (int r = 0; r < spec.dim; ++r) n += h.at(r, c) * h.at(r, c);
            n = std::sqrt(std::max(n, 1e-24));
            for (int r = 0; r < spec.dim; ++r) h.at(r, c) /= n;
        }
    };
    normalize_cols(head);

    std::map<std::string, Tensor> all = w.params;
    all["head"] = head;
    Adam opt;
    opt.lr = cfg.learning_rate;
    std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
    std::normal_distribution<double> nd(0.0, 1.0);

    for (int step = 0; step < cfg.steps; ++step) {
        std::map<std::string, ag::Var> p;
        for (const auto& [n, t] : all) p.emplace(n, ag::param(t));
        ag::Var total;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Item& it = items[pick(rng)];
            // Small random similarity jitter of the alignment as augmentation.
            AffineMatrix M = estimate_similarity(*it.lm, face_template());
            const double ang = 0.05 * nd(rng), sc = 1.0 + 0.03 * nd(rng);
            const double tx = 1.5 * nd(rng), ty = 1.5 * nd(rng);
            const double c = std::cos(ang) * sc, s = std::sin(ang) * sc;
            AffineMatrix J;
            J.m[0][0] = c;
            J.m[0][1] = -s;
            J.m[0][2] = 56 - c * 56 + s * 56 + tx;
            J.m[1][0] = s;
            J.m[1][1] = c;
            J.m[1][2] = 56 - s * 56 - c * 56 + ty;
            const AffineMatrix JM = compose(J, M);
            const ImageTensor crop = warp_to_crop(*it.img, JM);
            EncoderGraph g = forward_with(spec, p, ag::constant(crop.tensor()));
            ag::Var cos = ag::matmul(ag::reshape(g.embedding, {1, spec.dim}), p.at("head"));
            Tensor margin({1, n_cls});
            margin[static_cast<std::size_t>(it.label)] = -cfg.margin;
            ag::Var logits = ag::scale(ag::add(cos, ag::constant(margin)), cfg.scale);
            ag::Var ce = ag::cross_entropy(logits, {it.label});
            total = total.defined() ? ag::add(total, ce) : ce;
        }
        total = ag::scale(total, 1.0 / cfg.batch_size);
        if (!std::isfinite(total.item())) throw TrainingError("train_encoder: loss diverged at step " + std::to_string(step));
        ag::backward(total);
        std::map<std::string, Tensor> grads;
        for (const auto& [n, v] : p) grads.emplace(n, v.grad());
        opt.update(all, grads);
        normalize_cols(all.at("head"));
    }
    all.erase("head");
    w.params = std::move(all);
    return w;
}

double verification_auc(const EncoderWeights& w, const std::vector<ImageTensor>& crops, const std::vector<int>& labels) {
    if (crops.size() != labels.size() || crops.size() < 2) throw ParameterError("verification_auc: bad inputs");
    std::vector<IdentityEmbedding> e;
    for (const auto& c : crops) e.push_back(encode(w, c));
    std::vector<std::pair<double, bool>> scores;
    for (std::size_t i = 0; i < e.size(); ++i)
        for (std::size_t j = i + 1; j < e.size(); ++j)
            scores.emplace_back(cosine_similarity(e[i], e[j]), labels[i] == labels[j]);
    std::sort(scores.begin(), scores.end());
    // Mann-Whitney U with average ranks for ties.
    double rank_sum = 0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < scores.size();) {
        std::size_t j = i;
        while (j < scores.size() && scores[j].first == scores[i].first) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (scores[k].second) {
                rank_sum += avg;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ParameterError("verification_auc: need both same and different pairs");
    return (rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace dladiff
