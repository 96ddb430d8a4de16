#include "dverge/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include "json.hpp"
#include <sstream>
#include <stdexcept>

#include "dverge/rng.hpp"

DVERGE_NAMESPACE_BEGIN

namespace fs = std::filesystem;
using nlohmann::json;

Shape Dataset::sample_shape() const {
    if (images.rank() < 2) return {};
    return Shape(images.shape().begin() + 1, images.shape().end());
}

void Dataset::validate() const {
    if (images.rank() != 4) throw std::invalid_argument("dataset: images must be [count, channels, height, width]");
    if (images.dim(0) != labels.size()) {
        throw std::invalid_argument("dataset: " + std::to_string(images.dim(0)) + " images but " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) + " at index " +
                                        std::to_string(i) + " is not below " + std::to_string(classes));
        }
    }
    for (Scalar v : images.values()) {
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("dataset: pixel values must lie in [0, 1]");
    }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    Dataset d;
    d.images = images.gather_rows(indices);
    for (auto i : indices) d.labels.push_back(labels.at(i));
    d.classes = classes;
    d.split = split;
    d.provenance = provenance;
    return d;
}

Dataset Dataset::head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return subset(idx);
}

// ---------------------------------------------------------------------------
// synthetic glyphs

Tensor render_glyph(std::size_t k, std::size_t size, int shift_x, int shift_y) {
    Tensor img({size, size});
    const double s = static_cast<double>(size);
    const double h = s / 5.0;  // glyph half-extent
    const double off = s / 5.0;
    static constexpr int kOffsets[4][2] = {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}};
    const std::size_t variant = k / 5;
    double cx = s / 2.0, cy = s / 2.0;
    if (variant > 0) {
        const auto& o = kOffsets[(variant - 1) % 4];
        const double reach = off * static_cast<double>(1 + (variant - 1) / 4);
        cx += o[0] * reach;
        cy += o[1] * reach;
    }
    cx += shift_x;
    cy += shift_y;
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
            const double x = static_cast<double>(c) + 0.5 - cx;
            const double y = static_cast<double>(r) + 0.5 - cy;
            const bool hbar = std::abs(y) <= 1.0 && std::abs(x) <= h;
            const bool vbar = std::abs(x) <= 1.0 && std::abs(y) <= h;
            bool on = false;
            switch (k % 5) {
                case 0: on = hbar; break;
                case 1: on = vbar; break;
                case 2: on = x * x + y * y <= h * h; break;
                case 3: on = hbar || vbar; break;
                case 4: on = std::abs(x - y) <= 1.0 && std::abs(x) <= h && std::abs(y) <= h; break;
            }
            img[r * size + c] = on ? Scalar(1) : Scalar(0);
        }
    }
    return img;
}

Dataset gen_synthetic(const SyntheticSpec& spec, const std::string& split) {
    if (spec.classes < 2) throw std::invalid_argument("gen_synthetic: at least 2 classes required");
    if (spec.size < 4) throw std::invalid_argument("gen_synthetic: image size must be at least 4");
    if (spec.channels < 1) throw std::invalid_argument("gen_synthetic: channels must be >= 1");
    if (spec.noise < 0) throw std::invalid_argument("gen_synthetic: noise must be >= 0");
    if (spec.amplitude <= 0 || spec.background < 0 || spec.background + spec.amplitude > 1) {
        throw std::invalid_argument("gen_synthetic: need amplitude > 0 and 0 <= background <= background + amplitude <= 1");
    }
    if (split != "train" && split != "test") throw std::invalid_argument("gen_synthetic: split must be train or test");

    const std::size_t n = spec.classes * spec.per_class;
    const std::size_t plane = spec.size * spec.size;
    Dataset d;
    d.images = Tensor({n, spec.channels, spec.size, spec.size});
    d.labels.resize(n);
    d.classes = spec.classes;
    d.split = split;

    Rng rng(derive_seed(spec.seed, split));
    const int j = static_cast<int>(spec.jitter);
    std::vector<Tensor> canonical;
    for (std::size_t k = 0; k < spec.classes; ++k) canonical.push_back(render_glyph(k, spec.size));
    // samples interleave classes: index i has class i % C
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i % spec.classes;
        d.labels[i] = k;
        Tensor shifted;
        const Tensor* glyph = &canonical[k];
        if (j > 0) {
            const int sx = static_cast<int>(rng.below(2 * spec.jitter + 1)) - j;
            const int sy = static_cast<int>(rng.below(2 * spec.jitter + 1)) - j;
            shifted = render_glyph(k, spec.size, sx, sy);
            glyph = &shifted;
        }
        Scalar* dst = d.images.raw() + i * spec.channels * plane;
        for (std::size_t c = 0; c < spec.channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                double v = spec.background + spec.amplitude * static_cast<double>((*glyph)[p]);
                if (spec.noise > 0) v += (2.0 * rng.uniform() - 1.0) * spec.noise;
                v = std::clamp(v, 0.0, 1.0);
                dst[c * plane + p] = static_cast<Scalar>(std::round(v * 255.0) / 255.0);
            }
        }
    }
    d.provenance = {{"generator", "glyphs"},
                    {"classes", std::to_string(spec.classes)},
                    {"per_class", std::to_string(spec.per_class)},
                    {"size", std::to_string(spec.size)},
                    {"channels", std::to_string(spec.channels)},
                    {"noise", std::to_string(spec.noise)},
                    {"jitter", std::to_string(spec.jitter)},
                    {"amplitude", std::to_string(spec.amplitude)},
                    {"background", std::to_string(spec.background)},
                    {"seed", std::to_string(spec.seed)},
                    {"split", split}};
    return d;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const fs::path& path) {
    if (offset + 4 > b.size()) {
        throw std::runtime_error("idx '" + path.string() + "': truncated header at byte offset " +
                                 std::to_string(offset));
    }
    return (std::uint32_t(b[offset]) << 24) | (std::uint32_t(b[offset + 1]) << 16) |
           (std::uint32_t(b[offset + 2]) << 8) | std::uint32_t(b[offset + 3]);
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::string hex_magic(std::uint32_t m) {
    std::ostringstream os;
    os << "0x" << std::hex;
    os.width(8);
    os.fill('0');
    os << m;
    return os.str();
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels, std::size_t classes) {
    const auto ib = read_file(images);
    const auto lb = read_file(labels);

    const std::uint32_t im = read_be32(ib, 0, images);
    if (im != 0x803 && im != 0x804) {
        throw std::runtime_error("idx '" + images.string() + "': bad magic " + hex_magic(im) +
                                 " at byte offset 0 (expected 0x00000803 or 0x00000804)");
    }
    const std::size_t dims = im & 0xff;
    std::vector<std::size_t> shape;
    for (std::size_t i = 0; i < dims; ++i) shape.push_back(read_be32(ib, 4 + 4 * i, images));
    const std::size_t header = 4 + 4 * dims;
    const std::size_t count = shape[0];
    const std::size_t payload = shape_numel(shape);
    if (ib.size() < header + payload) {
        throw std::runtime_error("idx '" + images.string() + "': truncated payload at byte offset " +
                                 std::to_string(ib.size()) + " (expected " + std::to_string(header + payload) +
                                 " bytes)");
    }

    const std::uint32_t lm = read_be32(lb, 0, labels);
    if (lm != 0x801) {
        throw std::runtime_error("idx '" + labels.string() + "': bad magic " + hex_magic(lm) +
                                 " at byte offset 0 (expected 0x00000801)");
    }
    const std::size_t lcount = read_be32(lb, 4, labels);
    if (lcount != count) {
        throw std::runtime_error("idx: image count " + std::to_string(count) + " does not match label count " +
                                 std::to_string(lcount));
    }
    if (lb.size() < 8 + lcount) {
        throw std::runtime_error("idx '" + labels.string() + "': truncated payload at byte offset " +
                                 std::to_string(lb.size()) + " (expected " + std::to_string(8 + lcount) + " bytes)");
    }

    Dataset d;
    Shape ishape = dims == 3 ? Shape{count, 1, shape[1], shape[2]} : Shape{count, shape[1], shape[2], shape[3]};
    d.images = Tensor(ishape);
    for (std::size_t i = 0; i < payload; ++i) d.images[i] = static_cast<Scalar>(ib[header + i]) / Scalar(255);
    d.labels.resize(count);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < count; ++i) {
        d.labels[i] = lb[8 + i];
        max_label = std::max(max_label, d.labels[i]);
    }
    d.classes = classes > 0 ? classes : max_label + 1;
    d.split = "test";
    d.provenance = {{"source", "idx"},
                    {"images", images.string()},
                    {"labels", labels.string()},
                    {"images_fnv1a64", hex64(fnv1a64(ib.data(), ib.size()))},
                    {"labels_fnv1a64", hex64(fnv1a64(lb.data(), lb.size()))}};
    d.validate();
    return d;
}

void write_idx(const Dataset& data, const fs::path& images, const fs::path& labels) {
    data.validate();
    const Shape& s = data.images.shape();
    std::vector<unsigned char> ib;
    if (s[1] == 1) {
        put_be32(ib, 0x803);
        put_be32(ib, static_cast<std::uint32_t>(s[0]));
        put_be32(ib, static_cast<std::uint32_t>(s[2]));
        put_be32(ib, static_cast<std::uint32_t>(s[3]));
    } else {
        put_be32(ib, 0x804);
        for (auto d : s) put_be32(ib, static_cast<std::uint32_t>(d));
    }
    ib.reserve(ib.size() + data.images.size());
    for (Scalar v : data.images.values()) ib.push_back(static_cast<unsigned char>(std::lround(v * 255)));

    std::vector<unsigned char> lb;
    put_be32(lb, 0x801);
    put_be32(lb, static_cast<std::uint32_t>(data.labels.size()));
    for (auto l : data.labels) {
        if (l > 255) throw std::invalid_argument("write_idx: label " + std::to_string(l) + " does not fit in a byte");
        lb.push_back(static_cast<unsigned char>(l));
    }
    write_file(images, ib);
    write_file(labels, lb);
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t count, std::size_t batch, std::uint64_t seed) {
    if (batch == 0) throw std::invalid_argument("shuffled_batches: batch size must be positive");
    Rng rng(seed);
    const auto perm = rng.permutation(count);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < count; b += batch) {
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints

std::uint64_t fnv1a64(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

namespace {

json layer_to_json(const LayerSpec& l) {
    return {{"kind", to_string(l.kind)}, {"out", l.out},       {"kernel", l.kernel},         {"stride", l.stride},
            {"padding", l.padding},      {"window", l.window}, {"activation", l.activation}, {"tap", l.tap}};
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    l.kind = parse_layer_kind(j.at("kind").get<std::string>());
    l.out = j.at("out").get<std::size_t>();
    l.kernel = j.at("kernel").get<std::size_t>();
    l.stride = j.at("stride").get<std::size_t>();
    l.padding = j.at("padding").get<std::size_t>();
    l.window = j.at("window").get<std::size_t>();
    l.activation = j.at("activation").get<bool>();
    l.tap = j.at("tap").get<bool>();
    return l;
}

json spec_to_json(const ModelSpec& s) {
    return {{"arch", to_string(s.arch)},           {"input_shape", s.input_shape}, {"classes", s.classes},
            {"width", s.width},                    {"activation", to_string(s.activation)},
            {"seed", std::to_string(s.seed)}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.arch = parse_architecture(j.at("arch").get<std::string>());
    s.input_shape = j.at("input_shape").get<Shape>();
    s.classes = j.at("classes").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.activation = parse_activation(j.at("activation").get<std::string>());
    s.seed = std::stoull(j.at("seed").get<std::string>());
    return s;
}

void put_le32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("checkpoint: missing '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint: '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void check_version(const json& j, const fs::path& path) {
    const int v = j.value("format_version", -1);
    if (v != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: '" + path.string() + "' has format version " + std::to_string(v) +
                                 ", expected " + std::to_string(kCheckpointVersion));
    }
}

}  // namespace

void save_checkpoint(const Ensemble& ensemble, const fs::path& dir) {
    if (ensemble.empty()) throw std::invalid_argument("save_checkpoint: empty ensemble");
    fs::create_directories(dir);
    json index = {{"format_version", kCheckpointVersion}, {"count", ensemble.size()}, {"members", json::array()}};
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const LayeredModel& m = ensemble[i];
        const std::string sub = "sub_" + std::to_string(i);
        fs::create_directories(dir / sub);

        std::vector<unsigned char> blob;
        json table = json::array();
        for (const auto& [name, t] : m.parameters()) {
            const std::size_t offset = blob.size();
            for (Scalar v : t.values()) put_le32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", blob.size() - offset}});
        }
        json layers = json::array();
        for (const auto& l : m.layers()) layers.push_back(layer_to_json(l));
        json manifest = {{"format_version", kCheckpointVersion},
                         {"id", m.id()},
                         {"input_shape", m.input_shape()},
                         {"classes", m.classes()},
                         {"activation", to_string(m.activation())},
                         {"seed", std::to_string(m.seed())},
                         {"layers", layers},
                         {"tensors", table},
                         {"blob_bytes", blob.size()},
                         {"blob_fnv1a64", hex64(fnv1a64(blob.data(), blob.size()))}};
        if (m.spec()) manifest["architecture"] = spec_to_json(*m.spec());
        write_file(dir / sub / "weights.bin", blob);
        write_text(dir / sub / "manifest.json", manifest.dump(2));
        index["members"].push_back({{"id", m.id()}, {"path", sub}});
    }
    write_text(dir / "ensemble.json", index.dump(2));
}

Ensemble load_checkpoint(const fs::path& dir) {
    const json index = read_json(dir / "ensemble.json");
    check_version(index, dir / "ensemble.json");
    std::vector<LayeredModel> members;
    for (const auto& entry : index.at("members")) {
        const fs::path sub = dir / entry.at("path").get<std::string>();
        const json man = read_json(sub / "manifest.json");
        check_version(man, sub / "manifest.json");
        const auto blob = read_file(sub / "weights.bin");
        const std::size_t expected = man.at("blob_bytes").get<std::size_t>();
        if (blob.size() != expected) {
            throw std::runtime_error("checkpoint: '" + (sub / "weights.bin").string() + "' has " +
                                     std::to_string(blob.size()) + " bytes, manifest says " + std::to_string(expected));
        }
        if (hex64(fnv1a64(blob.data(), blob.size())) != man.at("blob_fnv1a64").get<std::string>()) {
            throw std::runtime_error("checkpoint: digest mismatch for '" + (sub / "weights.bin").string() + "'");
        }
        std::vector<LayerSpec> layers;
        for (const auto& l : man.at("layers")) layers.push_back(layer_from_json(l));
        LayeredModel m(man.at("id").get<std::string>(), man.at("input_shape").get<Shape>(),
                       man.at("classes").get<std::size_t>(), parse_activation(man.at("activation").get<std::string>()),
                       std::move(layers), std::stoull(man.at("seed").get<std::string>()));
        if (man.contains("architecture")) m.set_spec(spec_from_json(man.at("architecture")));

        std::size_t covered = 0;
        std::map<std::string, bool> seen;
        for (const auto& t : man.at("tensors")) {
            const std::string name = t.at("name").get<std::string>();
            auto it = m.parameters().find(name);
            if (it == m.parameters().end()) throw std::runtime_error("checkpoint: unexpected tensor '" + name + "'");
            const Shape shape = t.at("shape").get<Shape>();
            if (shape != it->second.shape()) {
                throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_to_string(shape) +
                                         ", model expects " + shape_to_string(it->second.shape()));
            }
            const std::size_t offset = t.at("offset").get<std::size_t>();
            const std::size_t bytes = t.at("bytes").get<std::size_t>();
            if (bytes != 4 * shape_numel(shape) || offset + bytes > blob.size()) {
                throw std::runtime_error("checkpoint: tensor '" + name + "' has an inconsistent table entry");
            }
            for (std::size_t k = 0; k < shape_numel(shape); ++k) {
                const std::size_t o = offset + 4 * k;
                const std::uint32_t bits = std::uint32_t(blob[o]) | (std::uint32_t(blob[o + 1]) << 8) |
                                           (std::uint32_t(blob[o + 2]) << 16) | (std::uint32_t(blob[o + 3]) << 24);
                it->second[k] = static_cast<Scalar>(std::bit_cast<float>(bits));
            }
            covered += bytes;
            seen[name] = true;
        }
        for (const auto& [name, t] : m.parameters()) {
            if (!seen.count(name)) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        }
        if (covered != blob.size()) throw std::runtime_error("checkpoint: blob length does not match tensor table");
        members.push_back(std::move(m));
    }
    return Ensemble(std::move(members));
}

DVERGE_NAMESPACE_END
