#include "retain/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace retain {

namespace {

constexpr char kMagic[8] = {'R', 'E', 'T', 'A', 'I', 'N', 'C', 'K'};
constexpr uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = kFnvOffset;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i64(std::string& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }

class Reader {
  public:
    Reader(const std::string& bytes, size_t limit) : bytes_(bytes), limit_(limit) {}
    uint16_t u16() { return static_cast<uint16_t>(u_n(2)); }
    uint32_t u32() { return static_cast<uint32_t>(u_n(4)); }
    uint64_t u64() { return u_n(8); }
    int64_t i64() { return static_cast<int64_t>(u_n(8)); }
    uint8_t u8() { return static_cast<uint8_t>(u_n(1)); }
    std::string str(size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    size_t pos() const { return pos_; }
    void need(size_t n) const {
        if (pos_ + n > limit_) throw std::runtime_error("checkpoint: truncated file");
    }

  private:
    uint64_t u_n(size_t n) {
        need(n);
        uint64_t v = 0;
        for (size_t i = 0; i < n; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += n;
        return v;
    }
    const std::string& bytes_;
    size_t limit_;
    size_t pos_ = 0;
};

std::string encode_metadata(const std::map<std::string, std::string>& metadata) {
    std::string out;
    for (const auto& [k, v] : metadata) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos)
            throw std::invalid_argument("checkpoint metadata: '=' in key or newline in entry: " + k);
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::map<std::string, std::string> decode_metadata(const std::string& text) {
    std::map<std::string, std::string> out;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) throw std::runtime_error("checkpoint metadata: missing newline");
        std::string line = text.substr(start, end - start);
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("checkpoint metadata: bad line '" + line + "'");
        out[line.substr(0, eq)] = line.substr(eq + 1);
        start = end + 1;
    }
    return out;
}

bool is_reserved(const std::string& name) { return name.starts_with("fisher.") || name.starts_with("snapshot."); }

bool is_bn_stat(const std::string& name) {
    return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put_u32(buf, version);
    if (arch.size() > 0xffffffffULL) throw std::invalid_argument("checkpoint: oversized arch block");
    put_u32(buf, static_cast<uint32_t>(arch.size()));
    buf += arch;
    const std::string meta = encode_metadata(metadata);
    put_u32(buf, static_cast<uint32_t>(meta.size()));
    buf += meta;

    put_u32(buf, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long");
        put_u16(buf, static_cast<uint16_t>(name.size()));
        buf += name;
        buf.push_back(0);  // dtype f32
        buf.push_back(static_cast<char>(t.rank()));
        for (int64_t d : t.shape) put_i64(buf, d);
        put_u64(buf, offset);
        offset += static_cast<uint64_t>(t.numel()) * 4;
    }
    put_u64(buf, offset);
    for (const auto& [name, t] : tensors) {
        for (float v : t.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(buf, bits);
        }
    }
    put_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kMagic) + 8) throw std::runtime_error("checkpoint: truncated file");

    const std::string body = bytes.substr(0, bytes.size() - 8);
    const std::string tail = bytes.substr(bytes.size() - 8);
    const uint64_t stored = Reader(tail, tail.size()).u64();
    if (fnv1a(body) != stored) throw std::runtime_error("checkpoint: checksum mismatch in " + path);

    Reader r(body, body.size());
    if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != 1)
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(ckpt.version));
    ckpt.arch = r.str(r.u32());
    ckpt.metadata = decode_metadata(r.str(r.u32()));

    const uint32_t count = r.u32();
    struct Entry {
        std::string name;
        std::vector<int64_t> shape;
        uint64_t offset;
    };
    std::vector<Entry> dir;
    dir.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.str(r.u16());
        const uint8_t dtype = r.u8();
        if (dtype != 0) throw std::runtime_error("checkpoint: unknown dtype for tensor " + e.name);
        const uint8_t rank = r.u8();
        for (uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.i64());
        e.offset = r.u64();
        dir.push_back(std::move(e));
    }
    const uint64_t payload_len = r.u64();
    const size_t payload_start = r.pos();
    r.need(payload_len);

    for (auto& e : dir) {
        const int64_t n = shape_numel(e.shape);
        if (e.offset + static_cast<uint64_t>(n) * 4 > payload_len)
            throw std::runtime_error("checkpoint: tensor " + e.name + " overruns payload");
        Tensor t(e.shape);
        Reader pr(body, body.size());
        pr.str(payload_start + e.offset);
        for (int64_t i = 0; i < n; ++i) {
            const uint32_t bits = pr.u32();
            std::memcpy(&t.data[static_cast<size_t>(i)], &bits, 4);
        }
        ckpt.tensors.emplace_back(e.name, std::move(t));
    }
    return ckpt;
}

Checkpoint Checkpoint::from_network(Network& net, std::map<std::string, std::string> metadata) {
    Checkpoint ckpt;
    ckpt.arch = net.descriptor();
    ckpt.metadata = std::move(metadata);
    for (auto& p : net.named_params()) ckpt.tensors.emplace_back(p.name, p.param->var->value);
    for (auto& b : net.named_buffers()) ckpt.tensors.emplace_back(b.name, *b.tensor);
    return ckpt;
}

Network Checkpoint::to_network() const {
    Network net = Network::from_descriptor(arch);
    const auto state = state_map();
    size_t expected = net.named_params().size() + net.named_buffers().size();
    if (state.size() != expected)
        throw std::runtime_error("checkpoint: architecture expects " + std::to_string(expected) + " tensors, file has " +
                                 std::to_string(state.size()));
    net.set_state(state);
    return net;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

std::map<std::string, Tensor> Checkpoint::state_map() const {
    std::map<std::string, Tensor> out;
    for (const auto& [n, t] : tensors)
        if (!is_reserved(n)) out[n] = t;
    return out;
}

bool Checkpoint::has_ewc_entries() const {
    for (const auto& [n, t] : tensors)
        if (is_reserved(n)) return true;
    return false;
}

Checkpoint bn_stats_transplant(const Checkpoint& dst, const Checkpoint& src) {
    std::vector<std::pair<std::string, std::vector<int64_t>>> dst_stats, src_stats;
    for (const auto& [n, t] : dst.tensors)
        if (is_bn_stat(n)) dst_stats.emplace_back(n, t.shape);
    for (const auto& [n, t] : src.tensors)
        if (is_bn_stat(n)) src_stats.emplace_back(n, t.shape);
    if (dst_stats != src_stats)
        throw std::invalid_argument("bn_stats_transplant: BN structure mismatch between checkpoints");

    Checkpoint out = dst;
    bool changed = false;
    for (auto& [n, t] : out.tensors) {
        if (!is_bn_stat(n)) continue;
        const Tensor* s = src.find(n);
        if (t.data != s->data) changed = true;
        t = *s;
    }
    if (changed) {
        auto it = src.metadata.find("id");
        out.metadata["transplant_src"] = it != src.metadata.end() ? it->second : "unnamed";
    }
    return out;
}

void attach_ewc_entries(Checkpoint& ckpt, const FisherDiagonal& fisher, const ParameterSnapshot& snapshot) {
    for (const auto& [name, t] : fisher.values) ckpt.tensors.emplace_back("fisher." + name, t);
    for (const auto& [name, t] : snapshot.values) ckpt.tensors.emplace_back("snapshot." + name, t);
    ckpt.metadata["fisher_samples"] = std::to_string(fisher.sample_count);
    if (!snapshot.source_id.empty()) ckpt.metadata["snapshot_source"] = snapshot.source_id;
}

FisherDiagonal fisher_from_checkpoint(const Checkpoint& ckpt) {
    FisherDiagonal f;
    for (const auto& [n, t] : ckpt.tensors)
        if (n.starts_with("fisher.")) f.values[n.substr(7)] = t;
    auto it = ckpt.metadata.find("fisher_samples");
    if (it != ckpt.metadata.end()) f.sample_count = std::stoll(it->second);
    if (f.values.empty()) throw std::runtime_error("checkpoint carries no fisher.* entries");
    return f;
}

ParameterSnapshot snapshot_from_checkpoint(const Checkpoint& ckpt) {
    ParameterSnapshot s;
    for (const auto& [n, t] : ckpt.tensors)
        if (n.starts_with("snapshot.")) s.values[n.substr(9)] = t;
    auto it = ckpt.metadata.find("snapshot_source");
    if (it != ckpt.metadata.end()) s.source_id = it->second;
    if (s.values.empty()) throw std::runtime_error("checkpoint carries no snapshot.* entries");
    return s;
}

}  // namespace retain
