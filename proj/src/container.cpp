#include "ttrx/container.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ttrx/errors.hpp"

namespace ttrx {

namespace {

constexpr std::string_view kHeaderLine = "TTRX\n";

std::string to_text(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw FormatError("cannot format number");
    return std::string(buf, end);
}

double parse_double(const std::string& s, const std::string& key) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size())
        throw FormatError("value of '" + key + "' is not a number: '" + s + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size() || s.empty())
        throw FormatError("value of '" + key + "' is not an unsigned integer: '" + s + "'");
    return v;
}

std::string shape_text(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

Shape parse_shape(const std::string& s, const std::string& key) {
    Shape shape;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t stop = std::min(s.find('x', start), s.size());
        const std::uint64_t d = parse_u64(s.substr(start, stop - start), key);
        if (d == 0) throw FormatError("'" + key + "' has a zero dimension");
        shape.push_back(static_cast<std::size_t>(d));
        start = stop + 1;
    }
    return shape;
}

void append_le(std::string& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.append(bytes, 8);
}

double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

void check_text(const std::string& s, bool is_key) {
    for (char c : s)
        if (c == '\n' || c == '\r' || (is_key && (c == '=' || c == ' ')))
            throw FormatError("container " + std::string(is_key ? "key" : "value") + " contains a reserved character: '" +
                              s + "'");
    if (is_key && s.empty()) throw FormatError("empty container key");
}

// Reads "key = value\n" at pos; returns false at end.
bool next_line(std::string_view text, std::size_t& pos, std::string& key, std::string& value) {
    if (pos >= text.size()) return false;
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("container header line is not terminated");
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    const std::size_t eq = line.find(" = ");
    if (eq == std::string_view::npos) throw FormatError("malformed container header line: '" + std::string(line) + "'");
    key = std::string(line.substr(0, eq));
    value = std::string(line.substr(eq + 3));
    return true;
}

std::string digest_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
        throw Error("SHA-1 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xf];
    }
    return out;
}

}  // namespace

// ---- Container ---------------------------------------------------------------

void Container::put(std::string name, Tensor t) {
    check_text(name, false);
    if (has(name)) throw FormatError("duplicate array name '" + name + "'");
    t.clear_grad();
    t.set_requires_grad(false);
    arrays.push_back(NamedTensor{std::move(name), std::move(t)});
}

const Tensor& Container::get(std::string_view name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a.tensor;
    throw FormatError("container has no array named '" + std::string(name) + "'");
}

bool Container::has(std::string_view name) const {
    return std::any_of(arrays.begin(), arrays.end(), [&](const NamedTensor& a) { return a.name == name; });
}

const std::string& Container::value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("container header lacks '" + key + "'");
    return it->second;
}

std::string sha1_hex(std::string_view bytes) { return digest_hex(bytes); }

std::string git_blob_sha1(std::string_view bytes) {
    std::string blob = "blob " + std::to_string(bytes.size());
    blob.push_back('\0');
    blob.append(bytes);
    return digest_hex(blob);
}

std::string serialize_container(const Container& c) {
    std::string payload;
    std::map<std::string, std::string> block = c.meta;
    for (const auto& [k, v] : block) {
        check_text(k, true);
        check_text(v, false);
        if (k.starts_with("array.") || k == "payload_elements" || k == "provenance.content_digest")
            throw FormatError("reserved container key '" + k + "'");
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < c.arrays.size(); ++i) {
        const auto& a = c.arrays[i];
        const std::string prefix = "array." + std::to_string(i) + ".";
        block[prefix + "name"] = a.name;
        block[prefix + "shape"] = shape_text(a.tensor.shape());
        block[prefix + "offset"] = std::to_string(offset);
        for (double v : a.tensor.data()) append_le(payload, v);
        offset += a.tensor.size();
    }
    block["payload_elements"] = std::to_string(offset);
    block["provenance.content_digest"] = git_blob_sha1(payload);

    std::string header;
    for (const auto& [k, v] : block) header += k + " = " + v + "\n";
    std::string out(kHeaderLine);
    out += "format_version = " + std::to_string(kContainerVersion) + "\n";
    out += "header_bytes = " + std::to_string(header.size()) + "\n";
    out += header;
    out += payload;
    return out;
}

Container parse_container(std::string_view bytes) {
    if (!bytes.starts_with(kHeaderLine)) throw FormatError("not a TTRX container (bad magic)");
    std::size_t pos = kHeaderLine.size();
    std::string key, value;
    if (!next_line(bytes, pos, key, value) || key != "format_version")
        throw FormatError("container lacks format_version");
    if (parse_u64(value, key) != static_cast<std::uint64_t>(kContainerVersion))
        throw FormatError("unsupported container format_version " + value);
    if (!next_line(bytes, pos, key, value) || key != "header_bytes") throw FormatError("container lacks header_bytes");
    const std::uint64_t header_bytes = parse_u64(value, key);
    if (header_bytes > bytes.size() - pos) throw FormatError("container header is truncated");
    const std::string_view header = bytes.substr(pos, header_bytes);
    const std::string_view payload = bytes.substr(pos + header_bytes);

    std::map<std::string, std::string> block;
    std::size_t hp = 0;
    while (next_line(header, hp, key, value))
        if (!block.emplace(key, value).second) throw FormatError("duplicate container key '" + key + "'");

    auto take = [&block](const std::string& k) {
        auto it = block.find(k);
        if (it == block.end()) throw FormatError("container header lacks '" + k + "'");
        std::string v = std::move(it->second);
        block.erase(it);
        return v;
    };
    const std::uint64_t elements = parse_u64(take("payload_elements"), "payload_elements");
    if (payload.size() != elements * 8)
        throw FormatError("container payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(elements * 8));
    const std::string digest = take("provenance.content_digest");
    if (git_blob_sha1(payload) != digest) throw FormatError("container payload digest mismatch");

    Container c;
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0;; ++i) {
        const std::string prefix = "array." + std::to_string(i) + ".";
        if (!block.contains(prefix + "name")) break;
        std::string name = take(prefix + "name");
        const Shape shape = parse_shape(take(prefix + "shape"), prefix + "shape");
        const std::uint64_t offset = parse_u64(take(prefix + "offset"), prefix + "offset");
        const std::size_t n = shape_numel(shape);
        if (offset != expected_offset || offset + n > elements)
            throw FormatError("array '" + name + "' has an inconsistent payload offset");
        std::vector<double> values(n);
        for (std::size_t k = 0; k < n; ++k) values[k] = read_le(payload.data() + 8 * (offset + k));
        c.put(std::move(name), Tensor(shape, std::move(values)));
        expected_offset += n;
    }
    if (expected_offset != elements) throw FormatError("container payload has unclaimed elements");
    for (const auto& [k, v] : block)
        if (k.starts_with("array.")) throw FormatError("unexpected container key '" + k + "'");
    c.meta = std::move(block);
    return c;
}

void save_container(const std::filesystem::path& path, const Container& c) {
    const std::string bytes = serialize_container(c);
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FileError("failed writing '" + path.string() + "'");
}

Container load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_container(ss.str());
}

// ---- checkpoints -------------------------------------------------------------

namespace {

void put_arch(Container& c, const ArchitectureDescriptor& a) {
    c.meta["arch.in_channels"] = std::to_string(a.in_channels);
    c.meta["arch.encoder_channels"] = std::to_string(a.encoder_channels);
    c.meta["arch.middle_channels"] = std::to_string(a.middle_channels);
    c.meta["arch.feature_channels"] = std::to_string(a.feature_channels);
    c.meta["arch.kernel"] = std::to_string(a.kernel);
    c.meta["arch.decoder_kernel"] = std::to_string(a.decoder_kernel);
    c.meta["arch.pool_levels"] = std::to_string(a.pool_levels);
}

std::size_t get_size(const Container& c, const std::string& key) {
    return static_cast<std::size_t>(parse_u64(c.value(key), key));
}

ArchitectureDescriptor get_arch(const Container& c) {
    ArchitectureDescriptor a;
    a.in_channels = get_size(c, "arch.in_channels");
    a.encoder_channels = get_size(c, "arch.encoder_channels");
    a.middle_channels = get_size(c, "arch.middle_channels");
    a.feature_channels = get_size(c, "arch.feature_channels");
    a.kernel = get_size(c, "arch.kernel");
    a.decoder_kernel = get_size(c, "arch.decoder_kernel");
    a.pool_levels = get_size(c, "arch.pool_levels");
    return a;
}

void require_kind(const Container& c, const std::string& kind) {
    if (c.value("kind") != kind) throw FormatError("container holds a " + c.value("kind") + ", expected a " + kind);
}

const char* split_names[] = {"existing.train", "existing.val", "fewshot.train", "fewshot.val", "fewshot.test"};

}  // namespace

Container to_container(const ModelCheckpoint& ckpt) {
    Container c;
    c.meta["kind"] = "model";
    c.meta["labels"] = ckpt.labels == LabelSet::Existing ? "existing" : "novel";
    c.meta["provenance.config_hash"] = ckpt.config_hash.empty() ? "none" : ckpt.config_hash;
    c.meta["provenance.seed"] = std::to_string(ckpt.seed);
    c.meta["trained"] = ckpt.model.trained ? "1" : "0";
    put_arch(c, ckpt.model.backbone.arch);
    for (const auto& p : ckpt.model.backbone.params) c.put("backbone." + p.name, p.tensor);
    c.put("head.weight", ckpt.model.head.weight);
    c.put("head.bias", ckpt.model.head.bias);
    return c;
}

ModelCheckpoint model_from_container(const Container& c) {
    require_kind(c, "model");
    ModelCheckpoint ckpt;
    const std::string& labels = c.value("labels");
    if (labels != "existing" && labels != "novel") throw FormatError("unknown label set '" + labels + "'");
    ckpt.labels = labels == "existing" ? LabelSet::Existing : LabelSet::Novel;
    ckpt.config_hash = c.value("provenance.config_hash");
    ckpt.seed = parse_u64(c.value("provenance.seed"), "provenance.seed");
    ckpt.model.trained = c.value("trained") == "1";

    // The stored arrays must match the layout implied by the architecture.
    BackboneParams expected = zero_backbone(get_arch(c));
    for (auto& p : expected.params) {
        const Tensor& stored = c.get("backbone." + p.name);
        if (stored.shape() != p.tensor.shape())
            throw FormatError("parameter '" + p.name + "' has shape " + shape_string(stored.shape()) + ", expected " +
                              shape_string(p.tensor.shape()));
        p.tensor = stored;
    }
    ckpt.model.backbone = std::move(expected);
    ckpt.model.head.weight = c.get("head.weight");
    ckpt.model.head.bias = c.get("head.bias");
    const auto& hw = ckpt.model.head.weight;
    if (hw.rank() != 2 || hw.dim(1) != ckpt.model.backbone.arch.feature_channels ||
        ckpt.model.head.bias.size() != hw.dim(0))
        throw FormatError("head shapes " + shape_string(hw.shape()) + " / " +
                          shape_string(ckpt.model.head.bias.shape()) + " do not fit the architecture");
    std::size_t expected_arrays = ckpt.model.backbone.params.size() + 2;
    if (c.arrays.size() != expected_arrays) throw FormatError("model container has unexpected extra arrays");
    return ckpt;
}

Container to_container(const Cohort& cohort, const std::string& config_hash) {
    Container c;
    const auto& cfg = cohort.config;
    c.meta["kind"] = "cohort";
    c.meta["provenance.config_hash"] = config_hash.empty() ? "none" : config_hash;
    c.meta["provenance.seed"] = std::to_string(cfg.seed);
    c.meta["cohort.height"] = std::to_string(cfg.height);
    c.meta["cohort.width"] = std::to_string(cfg.width);
    c.meta["cohort.existing_tracts"] = std::to_string(cfg.existing_tracts);
    c.meta["cohort.novel_tracts"] = std::to_string(cfg.novel_tracts);
    c.meta["cohort.correlation"] = to_text(cfg.correlation);
    c.meta["cohort.existing_train"] = std::to_string(cfg.existing_train);
    c.meta["cohort.existing_val"] = std::to_string(cfg.existing_val);
    c.meta["cohort.fewshot_train"] = std::to_string(cfg.fewshot_train);
    c.meta["cohort.fewshot_val"] = std::to_string(cfg.fewshot_val);
    c.meta["cohort.test"] = std::to_string(cfg.test);
    c.meta["cohort.seed"] = std::to_string(cfg.seed);
    c.meta["cohort.noise_std"] = to_text(cfg.noise_std);
    c.meta["cohort.jitter"] = to_text(cfg.jitter);
    for (std::size_t j = 0; j < cohort.novel_specs.size(); ++j) {
        const auto& s = cohort.novel_specs[j];
        const std::string p = "novel." + std::to_string(j) + ".";
        c.meta[p + "parent_a"] = std::to_string(s.parent_a);
        c.meta[p + "parent_b"] = std::to_string(s.parent_b);
        c.meta[p + "combination"] = s.combination == Combination::Union ? "union" : "intersection";
    }
    const std::vector<SyntheticSubject>* splits[] = {&cohort.existing.train, &cohort.existing.val,
                                                     &cohort.fewshot.train, &cohort.fewshot.val, &cohort.fewshot.test};
    for (std::size_t k = 0; k < 5; ++k) {
        const std::string base = std::string("split.") + split_names[k];
        c.meta[base + ".count"] = std::to_string(splits[k]->size());
        for (std::size_t i = 0; i < splits[k]->size(); ++i) {
            const auto& s = (*splits[k])[i];
            const std::string p = std::string(split_names[k]) + "." + std::to_string(i) + ".";
            c.meta[base + "." + std::to_string(i) + ".id"] = std::to_string(s.id);
            c.put(p + "input", s.input);
            c.put(p + "existing_labels", s.existing_labels);
            c.put(p + "novel_labels", s.novel_labels);
        }
    }
    return c;
}

Cohort cohort_from_container(const Container& c) {
    require_kind(c, "cohort");
    Cohort cohort;
    auto& cfg = cohort.config;
    cfg.height = get_size(c, "cohort.height");
    cfg.width = get_size(c, "cohort.width");
    cfg.existing_tracts = get_size(c, "cohort.existing_tracts");
    cfg.novel_tracts = get_size(c, "cohort.novel_tracts");
    cfg.correlation = parse_double(c.value("cohort.correlation"), "cohort.correlation");
    cfg.existing_train = get_size(c, "cohort.existing_train");
    cfg.existing_val = get_size(c, "cohort.existing_val");
    cfg.fewshot_train = get_size(c, "cohort.fewshot_train");
    cfg.fewshot_val = get_size(c, "cohort.fewshot_val");
    cfg.test = get_size(c, "cohort.test");
    cfg.seed = parse_u64(c.value("cohort.seed"), "cohort.seed");
    cfg.noise_std = parse_double(c.value("cohort.noise_std"), "cohort.noise_std");
    cfg.jitter = parse_double(c.value("cohort.jitter"), "cohort.jitter");
    for (std::size_t j = 0; j < cfg.novel_tracts; ++j) {
        const std::string p = "novel." + std::to_string(j) + ".";
        NovelTractSpec s;
        s.parent_a = get_size(c, p + "parent_a");
        s.parent_b = get_size(c, p + "parent_b");
        const std::string& comb = c.value(p + "combination");
        if (comb != "union" && comb != "intersection") throw FormatError("unknown combination '" + comb + "'");
        s.combination = comb == "union" ? Combination::Union : Combination::Intersection;
        cohort.novel_specs.push_back(s);
    }
    const Shape input_shape{kInputChannels, cfg.height, cfg.width};
    const Shape existing_shape{cfg.existing_tracts, cfg.height, cfg.width};
    const Shape novel_shape{cfg.novel_tracts, cfg.height, cfg.width};
    std::vector<SyntheticSubject>* splits[] = {&cohort.existing.train, &cohort.existing.val, &cohort.fewshot.train,
                                               &cohort.fewshot.val, &cohort.fewshot.test};
    for (std::size_t k = 0; k < 5; ++k) {
        const std::string base = std::string("split.") + split_names[k];
        const std::size_t count = get_size(c, base + ".count");
        for (std::size_t i = 0; i < count; ++i) {
            const std::string p = std::string(split_names[k]) + "." + std::to_string(i) + ".";
            SyntheticSubject s;
            s.id = parse_u64(c.value(base + "." + std::to_string(i) + ".id"), base + ".id");
            s.input = c.get(p + "input");
            s.existing_labels = c.get(p + "existing_labels");
            s.novel_labels = c.get(p + "novel_labels");
            if (s.input.shape() != input_shape || s.existing_labels.shape() != existing_shape ||
                s.novel_labels.shape() != novel_shape)
                throw FormatError("subject " + std::to_string(s.id) + " has shapes inconsistent with the cohort header");
            splits[k]->push_back(std::move(s));
        }
    }
    return cohort;
}

}  // namespace ttrx
