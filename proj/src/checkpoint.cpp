#include "capseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace capseg {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'S', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_entry(std::string& out, const std::string& name, const Shape& shape,
               const std::vector<float>& values) {
    check_contract(name.size() <= 0xffff, "checkpoint: parameter name too long");
    put_u16le(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(shape.size()));
    for (auto e : shape) put_u32le(out, static_cast<std::uint32_t>(e));
    for (float f : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32le(out, bits);
    }
}

// Round a live double tensor through f32, returning the rounded floats.
std::vector<float> round_through_f32(Tensor& t) {
    double* v = t.data();
    std::vector<float> out(static_cast<size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        out[static_cast<size_t>(i)] = static_cast<float>(v[i]);
        v[i] = static_cast<double>(out[static_cast<size_t>(i)]);
    }
    return out;
}

std::vector<float> round_through_f32(std::vector<double>& v) {
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = static_cast<float>(v[i]);
        v[i] = static_cast<double>(out[i]);
    }
    return out;
}

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open checkpoint '" + path + "'", 0);
        std::ostringstream ss;
        ss << in.rdbuf();
        bytes_ = ss.str();
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[offset_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v = static_cast<std::uint16_t>(
                v | static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[offset_ + i]))
                        << (8 * i));
        offset_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[offset_ + i]))
                 << (8 * i);
        offset_ += 4;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t lo = u32();
        std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes_.substr(offset_, n);
        offset_ += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    void expect_magic() {
        need(4);
        if (std::memcmp(bytes_.data() + offset_, kMagic, 4) != 0)
            throw FormatError("bad checkpoint magic in '" + path_ + "'", offset_);
        offset_ += 4;
    }
    void expect_end() {
        if (offset_ != bytes_.size())
            throw FormatError("trailing bytes in checkpoint '" + path_ + "'", offset_);
    }
    std::uint64_t offset() const { return offset_; }

private:
    void need(size_t n) {
        if (offset_ + n > bytes_.size())
            throw FormatError("truncated checkpoint '" + path_ + "'", offset_);
    }
    std::string path_;
    std::string bytes_;
    std::uint64_t offset_ = 0;
};

CheckpointEntry read_entry(Reader& r) {
    CheckpointEntry e;
    const std::uint16_t name_len = r.u16();
    e.name = r.str(name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != 0)
        throw FormatError("unsupported checkpoint dtype " + std::to_string(dtype),
                          r.offset() - 1);
    const std::uint8_t rank = r.u8();
    std::int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        e.shape.push_back(static_cast<std::int64_t>(r.u32()));
        numel *= e.shape.back();
    }
    e.values.resize(static_cast<size_t>(numel));
    for (auto& f : e.values) f = r.f32();
    return e;
}

std::vector<float> scalar_f32(double v) {
    return {static_cast<float>(v)};
}

}  // namespace

const CheckpointEntry* Checkpoint::find_opt(const std::string& name) const {
    for (const auto& e : optimizer)
        if (e.name == name) return &e;
    return nullptr;
}

void checkpoint_save(const std::string& path, ModelParams& params, AdamState& opt,
                     std::int64_t iteration, std::uint64_t config_hash) {
    std::string out;
    out.append(kMagic, 4);
    put_u32le(out, kVersion);

    const auto names = params.order();
    put_u32le(out, static_cast<std::uint32_t>(names.size()));
    for (const auto& name : names) {
        Tensor& t = params.at(name);
        put_entry(out, name, t.shape(), round_through_f32(t));
    }

    // optimizer block: moments for every trainable plus scheduler scalars
    std::vector<std::pair<std::string, std::vector<float>>> opt_entries;
    std::vector<std::pair<std::string, Shape>> opt_shapes;
    for (const auto& name : names) {
        if (!params.is_trainable(name)) continue;
        auto it = opt.moments.find(name);
        if (it == opt.moments.end()) continue;
        opt_entries.emplace_back("adam.m." + name, round_through_f32(it->second.m));
        opt_shapes.emplace_back("adam.m." + name, params.at(name).shape());
        opt_entries.emplace_back("adam.v." + name, round_through_f32(it->second.v));
        opt_shapes.emplace_back("adam.v." + name, params.at(name).shape());
    }
    // round the live scheduler state exactly like the stored copy
    opt.learning_rate = static_cast<double>(static_cast<float>(opt.learning_rate));
    opt.best_metric = static_cast<double>(static_cast<float>(opt.best_metric));
    opt_entries.emplace_back("opt.step", scalar_f32(static_cast<double>(opt.step_count)));
    opt_shapes.emplace_back("opt.step", Shape{1});
    opt_entries.emplace_back("opt.lr", scalar_f32(opt.learning_rate));
    opt_shapes.emplace_back("opt.lr", Shape{1});
    opt_entries.emplace_back("opt.best_dice", scalar_f32(opt.best_metric));
    opt_shapes.emplace_back("opt.best_dice", Shape{1});
    opt_entries.emplace_back("opt.since_improve",
                             scalar_f32(static_cast<double>(opt.since_improve)));
    opt_shapes.emplace_back("opt.since_improve", Shape{1});
    opt_entries.emplace_back("opt.iteration", scalar_f32(static_cast<double>(iteration)));
    opt_shapes.emplace_back("opt.iteration", Shape{1});

    put_u32le(out, static_cast<std::uint32_t>(opt_entries.size()));
    for (size_t i = 0; i < opt_entries.size(); ++i)
        put_entry(out, opt_entries[i].first, opt_shapes[i].second, opt_entries[i].second);

    put_u64le(out, config_hash);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing", 0);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write to '" + path + "'", 0);
}

Checkpoint checkpoint_load(const std::string& path) {
    Reader r(path);
    r.expect_magic();
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version),
                          r.offset() - 4);
    Checkpoint ckpt;
    const std::uint32_t param_count = r.u32();
    for (std::uint32_t i = 0; i < param_count; ++i) ckpt.params.push_back(read_entry(r));
    const std::uint32_t opt_count = r.u32();
    for (std::uint32_t i = 0; i < opt_count; ++i) ckpt.optimizer.push_back(read_entry(r));
    ckpt.config_hash = r.u64();
    r.expect_end();
    return ckpt;
}

std::int64_t checkpoint_apply(const Checkpoint& ckpt, ModelParams& params, AdamState* opt,
                              std::uint64_t expected_hash) {
    if (ckpt.config_hash != expected_hash)
        throw ContractError("checkpoint config hash mismatch: checkpoint " +
                            std::to_string(ckpt.config_hash) + " vs expected " +
                            std::to_string(expected_hash));

    // verify the manifest in full before touching anything
    const auto manifest = params.manifest();
    std::string diff;
    if (ckpt.params.size() != manifest.size())
        diff += "  entry count: checkpoint " + std::to_string(ckpt.params.size()) +
                " vs model " + std::to_string(manifest.size()) + "\n";
    const size_t n = std::min(ckpt.params.size(), manifest.size());
    for (size_t i = 0; i < n; ++i) {
        if (ckpt.params[i].name != manifest[i].first)
            diff += "  [" + std::to_string(i) + "] name: checkpoint '" + ckpt.params[i].name +
                    "' vs model '" + manifest[i].first + "'\n";
        else if (ckpt.params[i].shape != manifest[i].second)
            diff += "  " + ckpt.params[i].name + ": checkpoint " +
                    shape_str(ckpt.params[i].shape) + " vs model " +
                    shape_str(manifest[i].second) + "\n";
    }
    if (!diff.empty())
        throw ContractError("checkpoint manifest mismatch:\n" + diff);

    for (const auto& e : ckpt.params) {
        std::vector<double> values(e.values.size());
        for (size_t i = 0; i < e.values.size(); ++i) values[i] = static_cast<double>(e.values[i]);
        params.at(e.name).assign_values(values);
    }

    std::int64_t iteration = 0;
    if (const auto* it = ckpt.find_opt("opt.iteration"))
        iteration = static_cast<std::int64_t>(it->values[0]);
    if (opt) {
        opt->moments.clear();
        for (const auto& e : ckpt.optimizer) {
            if (e.name.rfind("adam.m.", 0) == 0 || e.name.rfind("adam.v.", 0) == 0) {
                const bool is_m = e.name[5] == 'm';
                const std::string pname = e.name.substr(7);
                auto& mom = opt->moments[pname];
                auto& dst = is_m ? mom.m : mom.v;
                dst.resize(e.values.size());
                for (size_t i = 0; i < e.values.size(); ++i)
                    dst[i] = static_cast<double>(e.values[i]);
            }
        }
        if (const auto* e = ckpt.find_opt("opt.step"))
            opt->step_count = static_cast<std::int64_t>(e->values[0]);
        if (const auto* e = ckpt.find_opt("opt.lr"))
            opt->learning_rate = static_cast<double>(e->values[0]);
        if (const auto* e = ckpt.find_opt("opt.best_dice"))
            opt->best_metric = static_cast<double>(e->values[0]);
        if (const auto* e = ckpt.find_opt("opt.since_improve"))
            opt->since_improve = static_cast<std::int64_t>(e->values[0]);
    }
    return iteration;
}

std::vector<std::string> checkpoint_apply_subset(const Checkpoint& ckpt, ModelParams& params) {
    std::vector<std::string> applied;
    for (const auto& e : ckpt.params) {
        if (!params.has(e.name)) continue;
        Tensor& t = params.at(e.name);
        check_shape(t.shape() == e.shape, "checkpoint subset: shape mismatch for '" + e.name +
                                              "': " + shape_str(e.shape) + " vs " +
                                              shape_str(t.shape()));
        std::vector<double> values(e.values.size());
        for (size_t i = 0; i < e.values.size(); ++i) values[i] = static_cast<double>(e.values[i]);
        t.assign_values(values);
        applied.push_back(e.name);
    }
    return applied;
}

}  // namespace capseg
