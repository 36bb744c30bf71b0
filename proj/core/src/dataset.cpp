#include "vitdec/dataset.hpp"

#include "vitdec/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace vitdec {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetSpec::validate() const {
    if (n_fg < 1 || n_bg < 1) throw std::invalid_argument("dataset spec: empty class lists");
    if (fg_style != "distinct" && fg_style != "mono" && fg_style != "paired")
        throw std::invalid_argument("dataset spec: unknown fg_style '" + fg_style + "'");
    if (n_train < 0 || n_val < 0 || n_test < 0) throw std::invalid_argument("dataset spec: negative split size");
    if (image_size < 8) throw std::invalid_argument("dataset spec: image_size too small");
    for (double r : {rho_train, rho_val, rho_test})
        if (r < 0.0 || r > 1.0) throw std::invalid_argument("dataset spec: rho outside [0,1]");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::invalid_argument("unknown split: " + s);
}

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

namespace {

struct Rgb {
    float r, g, b;
};

Rgb bg_color(int bg) {
    static const Rgb palette[] = {
        {0.58f, 0.46f, 0.24f}, // warm sand
        {0.20f, 0.36f, 0.62f}, // cool water
        {0.30f, 0.52f, 0.30f}, // green
        {0.50f, 0.30f, 0.52f}, // violet
    };
    return palette[bg % 4];
}

Rgb fg_color(int fg) {
    static const Rgb palette[] = {
        {0.92f, 0.25f, 0.21f},
        {0.95f, 0.86f, 0.25f},
        {0.22f, 0.85f, 0.80f},
        {0.93f, 0.47f, 0.85f},
        {0.65f, 0.95f, 0.35f},
        {0.35f, 0.35f, 0.95f},
    };
    return palette[fg % 6];
}

bool inside_shape(int fg, float dx, float dy, float half) {
    switch (fg % 4) {
        case 0: // square
            return std::abs(dx) <= half && std::abs(dy) <= half;
        case 1: // disk
            return dx * dx + dy * dy <= half * half;
        case 2: // triangle (point-up)
            return dy <= half && dy >= -half && std::abs(dx) <= (dy + half) * 0.5f + 0.5f;
        case 3: // cross
            return (std::abs(dx) <= half * 0.38f && std::abs(dy) <= half) ||
                   (std::abs(dy) <= half * 0.38f && std::abs(dx) <= half);
    }
    return false;
}

Tensor render_image(const DatasetSpec& spec, int fg, int bg, Rng& rng) {
    const int s = spec.image_size;
    Tensor img({3, s, s});
    // background: oriented sinusoid stripes
    float angle = static_cast<float>(M_PI) * static_cast<float>(bg) / static_cast<float>(std::max(2, spec.n_bg));
    float ca = std::cos(angle), sa = std::sin(angle);
    float period = 5.0f + rng.uniform(-0.8f, 0.8f);
    float phase = rng.uniform(0.0f, 6.2831853f);
    float amp = 0.22f + rng.uniform(-0.04f, 0.04f);
    Rgb base = bg_color(bg);
    float tint = rng.uniform(-0.05f, 0.05f);

    // foreground placement
    float cx = s / 2.0f + rng.uniform(-3.0f, 3.0f);
    float cy = s / 2.0f + rng.uniform(-3.0f, 3.0f);
    float half = s * spec.fg_half + rng.uniform(-1.5f, 1.5f);
    int shape = fg;
    Rgb fgc = fg_color(fg);
    if (spec.fg_style == "mono") {
        fgc = Rgb{0.82f, 0.80f, 0.78f};
    } else if (spec.fg_style == "paired") {
        shape = (fg % 2) * 3; // square vs cross carries the hard bit
        fgc = fg_color(fg / 2);
    }
    float fg_tint = rng.uniform(-0.06f, 0.06f);

    auto px = [&](int c, int y, int x) -> float& {
        return img.data[static_cast<size_t>(c) * s * s + static_cast<size_t>(y) * s + x];
    };
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            float u = ca * static_cast<float>(x) + sa * static_cast<float>(y);
            float wave = amp * std::sin(2.0f * static_cast<float>(M_PI) * u / period + phase);
            float r = base.r + wave + tint;
            float g = base.g + wave + tint;
            float b = base.b + wave + tint;
            if (inside_shape(shape, static_cast<float>(x) - cx, static_cast<float>(y) - cy, half)) {
                float a = spec.fg_alpha;
                r = a * (fgc.r + fg_tint) + (1.0f - a) * r;
                g = a * (fgc.g + fg_tint) + (1.0f - a) * g;
                b = a * (fgc.b + fg_tint) + (1.0f - a) * b;
            }
            px(0, y, x) = r;
            px(1, y, x) = g;
            px(2, y, x) = b;
        }
    }
    if (spec.noise > 0.0f)
        for (float& v : img.data) v += rng.gaussian(0.0f, spec.noise);
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

/// Deterministic background allocation: per class, exactly round(rho*m)
/// images get the class's preferred background, the rest cycle over the
/// other backgrounds; the assignment is then shuffled within the class.
void assign_groups(const DatasetSpec& spec, std::vector<int>& labels, std::vector<int>& groups,
                   int begin, int count, double rho, Rng& rng) {
    for (int i = 0; i < count; ++i) labels[begin + i] = i % spec.n_fg;
    for (int c = 0; c < spec.n_fg; ++c) {
        std::vector<int> members;
        for (int i = 0; i < count; ++i)
            if (labels[begin + i] == c) members.push_back(begin + i);
        int pref = c % spec.n_bg;
        int k = static_cast<int>(std::lround(rho * static_cast<double>(members.size())));
        std::vector<int> assignment(members.size());
        for (size_t i = 0; i < members.size(); ++i) {
            if (static_cast<int>(i) < k || spec.n_bg == 1) {
                assignment[i] = pref;
            } else {
                int off = static_cast<int>(i) % (spec.n_bg - 1);
                assignment[i] = (pref + 1 + off) % spec.n_bg;
            }
        }
        std::shuffle(assignment.begin(), assignment.end(), rng.engine());
        for (size_t i = 0; i < members.size(); ++i) groups[members[i]] = assignment[i];
    }
}

} // namespace

SyntheticDataset gen_synthetic(const DatasetSpec& spec) {
    spec.validate();
    SyntheticDataset ds;
    ds.spec = spec;
    const int total = spec.n_train + spec.n_val + spec.n_test;
    ds.images.resize(static_cast<size_t>(total));
    ds.labels.assign(static_cast<size_t>(total), 0);
    ds.groups.assign(static_cast<size_t>(total), 0);

    Rng root(spec.seed);
    Rng train_rng = root.fork(101), val_rng = root.fork(202), test_rng = root.fork(303);
    assign_groups(spec, ds.labels, ds.groups, 0, spec.n_train, spec.rho_train, train_rng);
    assign_groups(spec, ds.labels, ds.groups, spec.n_train, spec.n_val, spec.rho_val, val_rng);
    assign_groups(spec, ds.labels, ds.groups, spec.n_train + spec.n_val, spec.n_test, spec.rho_test, test_rng);

    for (int i = 0; i < spec.n_train; ++i) ds.train_idx.push_back(i);
    for (int i = 0; i < spec.n_val; ++i) ds.val_idx.push_back(spec.n_train + i);
    for (int i = 0; i < spec.n_test; ++i) ds.test_idx.push_back(spec.n_train + spec.n_val + i);

    parallel_for(total, [&](int i) {
        Rng rng = root.fork(0x1000 + static_cast<uint64_t>(i));
        ds.images[static_cast<size_t>(i)] = render_image(spec, ds.labels[i], ds.groups[i], rng);
    });
    return ds;
}

void save_dataset(const SyntheticDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["n_fg"] = ds.spec.n_fg;
    manifest["n_bg"] = ds.spec.n_bg;
    manifest["n_train"] = ds.spec.n_train;
    manifest["n_val"] = ds.spec.n_val;
    manifest["n_test"] = ds.spec.n_test;
    manifest["rho_train"] = ds.spec.rho_train;
    manifest["rho_val"] = ds.spec.rho_val;
    manifest["rho_test"] = ds.spec.rho_test;
    manifest["image_size"] = ds.spec.image_size;
    manifest["fg_alpha"] = ds.spec.fg_alpha;
    manifest["fg_half"] = ds.spec.fg_half;
    manifest["noise"] = ds.spec.noise;
    manifest["fg_style"] = ds.spec.fg_style;
    manifest["seed"] = ds.spec.seed;
    manifest["labels"] = ds.labels;
    manifest["groups"] = ds.groups;
    manifest["train_idx"] = ds.train_idx;
    manifest["val_idx"] = ds.val_idx;
    manifest["test_idx"] = ds.test_idx;

    std::string tmp = dir + "/manifest.json.tmp";
    {
        std::ofstream out(tmp);
        out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, dir + "/manifest.json");

    tmp = dir + "/images.f32.tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        for (const Tensor& img : ds.images)
            out.write(reinterpret_cast<const char*>(img.data.data()),
                      static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    }
    fs::rename(tmp, dir + "/images.f32");
}

SyntheticDataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("dataset: cannot open " + dir + "/manifest.json");
    json manifest = json::parse(in);

    SyntheticDataset ds;
    ds.spec.n_fg = manifest.at("n_fg");
    ds.spec.n_bg = manifest.at("n_bg");
    ds.spec.n_train = manifest.at("n_train");
    ds.spec.n_val = manifest.at("n_val");
    ds.spec.n_test = manifest.at("n_test");
    ds.spec.rho_train = manifest.at("rho_train");
    ds.spec.rho_val = manifest.at("rho_val");
    ds.spec.rho_test = manifest.at("rho_test");
    ds.spec.image_size = manifest.at("image_size");
    ds.spec.fg_alpha = manifest.at("fg_alpha");
    ds.spec.fg_half = manifest.value("fg_half", 0.20f);
    ds.spec.noise = manifest.at("noise");
    ds.spec.fg_style = manifest.value("fg_style", "distinct");
    ds.spec.seed = manifest.at("seed");
    ds.labels = manifest.at("labels").get<std::vector<int>>();
    ds.groups = manifest.at("groups").get<std::vector<int>>();
    ds.train_idx = manifest.at("train_idx").get<std::vector<int>>();
    ds.val_idx = manifest.at("val_idx").get<std::vector<int>>();
    ds.test_idx = manifest.at("test_idx").get<std::vector<int>>();

    const int s = ds.spec.image_size;
    const size_t per = static_cast<size_t>(3) * s * s;
    std::ifstream blob(dir + "/images.f32", std::ios::binary);
    if (!blob) throw std::runtime_error("dataset: cannot open " + dir + "/images.f32");
    ds.images.resize(ds.labels.size());
    for (Tensor& img : ds.images) {
        img = Tensor({3, s, s});
        blob.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(per * sizeof(float)));
        if (!blob) throw std::runtime_error("dataset: images.f32 truncated in " + dir);
    }
    if (ds.labels.size() != ds.groups.size() ||
        ds.labels.size() != static_cast<size_t>(ds.spec.n_train + ds.spec.n_val + ds.spec.n_test))
        throw std::runtime_error("dataset: manifest is inconsistent in " + dir);
    return ds;
}

Tensor patchify(const Tensor& image, int grid) {
    const int s = image.dim(1);
    if (image.ndim() != 3 || image.dim(2) != s) throw std::invalid_argument("patchify: image must be (C,S,S)");
    if (s % grid != 0) throw std::invalid_argument("patchify: grid does not divide image size");
    const int c = image.dim(0);
    const int p = s / grid;
    Tensor out({grid * grid, c * p * p});
    for (int ry = 0; ry < grid; ++ry)
        for (int rx = 0; rx < grid; ++rx) {
            int row = ry * grid + rx;
            int col = 0;
            for (int ch = 0; ch < c; ++ch)
                for (int py = 0; py < p; ++py)
                    for (int pxi = 0; pxi < p; ++pxi) {
                        int y = ry * p + py, x = rx * p + pxi;
                        out.at(row, col++) =
                            image.data[static_cast<size_t>(ch) * s * s + static_cast<size_t>(y) * s + x];
                    }
        }
    return out;
}

} // namespace vitdec
