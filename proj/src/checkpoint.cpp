#include "stg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stg/common.hpp"

namespace stg {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', 'T', 'G', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::string& out, std::uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), 8);
}

struct Reader {
    const std::string& s;
    std::size_t off = 0;
    void need(std::size_t n, const char* what) const {
        if (off + n > s.size()) throw FormatError(std::string("checkpoint truncated at ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, s.data() + off, 4);
        off += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, s.data() + off, 8);
        off += 8;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string v = s.substr(off, n);
        off += n;
        return v;
    }
};

json meta_to_json(const CheckpointMeta& m) {
    json arch;
    arch["obs_dim"] = m.arch.obs_dim;
    arch["hidden"] = m.arch.hidden;
    arch["activation"] = to_string(m.arch.act);
    arch["action_dims"] = m.arch.action_dims;
    arch["action_bins"] = m.arch.action_bins;
    arch["steps_bins"] = m.arch.steps_bins;
    json j;
    j["step"] = m.step;
    j["val_bc_loss"] = m.val_bc_loss;
    j["val_stg_loss"] = m.val_stg_loss;
    j["config_hash"] = m.config_hash;
    j["tool_version"] = m.tool_version.empty() ? kToolVersion : m.tool_version;
    j["arch"] = arch;
    return j;
}

CheckpointMeta meta_from_json(const json& j) {
    CheckpointMeta m;
    m.step = j.at("step").get<long>();
    m.val_bc_loss = j.at("val_bc_loss").get<double>();
    m.val_stg_loss = j.at("val_stg_loss").get<double>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.tool_version = j.at("tool_version").get<std::string>();
    const json& arch = j.at("arch");
    m.arch.obs_dim = arch.at("obs_dim").get<int>();
    m.arch.hidden = arch.at("hidden").get<std::vector<int>>();
    m.arch.act = activation_from_string(arch.at("activation").get<std::string>());
    m.arch.action_dims = arch.at("action_dims").get<int>();
    m.arch.action_bins = arch.at("action_bins").get<int>();
    m.arch.steps_bins = arch.at("steps_bins").get<int>();
    return m;
}

}  // namespace

std::string serialize_checkpoint(const DenseNet& net, const CheckpointMeta& meta) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    std::string mj = meta_to_json(meta).dump();
    put_u64(out, mj.size());
    out += mj;

    auto views = tensor_views(const_cast<DenseNet&>(net));
    for (const auto& tv : views) {
        put_u32(out, static_cast<std::uint32_t>(tv.name.size()));
        out += tv.name;
        put_u32(out, static_cast<std::uint32_t>(tv.dims.size()));
        for (int d : tv.dims) put_u32(out, static_cast<std::uint32_t>(d));
        if (tv.dims.size() == 2) {
            Eigen::Map<const MatrixXd> m(tv.data, tv.dims[0], tv.dims[1]);
            for (int r = 0; r < tv.dims[0]; ++r)
                for (int c = 0; c < tv.dims[1]; ++c) {
                    float f = static_cast<float>(m(r, c));
                    out.append(reinterpret_cast<const char*>(&f), 4);
                }
        } else {
            for (long i = 0; i < tv.size(); ++i) {
                float f = static_cast<float>(tv.data[i]);
                out.append(reinterpret_cast<const char*>(&f), 4);
            }
        }
    }
    return out;
}

std::pair<DenseNet, CheckpointMeta> deserialize_checkpoint(const std::string& bytes) {
    Reader rd{bytes};
    std::string magic = rd.bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic");
    std::uint32_t ver = rd.u32("version");
    if (ver != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(ver));
    std::uint64_t mlen = rd.u64("meta length");
    json mj;
    try {
        mj = json::parse(rd.bytes(mlen, "metadata"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad metadata JSON: ") + e.what());
    }
    CheckpointMeta meta = meta_from_json(mj);

    DenseNet net = make_net(meta.arch, 0);
    auto views = tensor_views(net);
    for (auto& tv : views) {
        std::uint32_t nlen = rd.u32("tensor name length");
        std::string name = rd.bytes(nlen, "tensor name");
        if (name != tv.name)
            throw FormatError("checkpoint: tensor order mismatch, expected " + tv.name +
                              " got " + name);
        std::uint32_t rank = rd.u32("tensor rank");
        if (rank != tv.dims.size()) throw FormatError("checkpoint: rank mismatch for " + name);
        for (std::size_t i = 0; i < rank; ++i) {
            std::uint32_t d = rd.u32("tensor dim");
            if (static_cast<int>(d) != tv.dims[i])
                throw FormatError("checkpoint: dim mismatch for " + name);
        }
        std::string payload = rd.bytes(4 * static_cast<std::size_t>(tv.size()), "tensor payload");
        const char* p = payload.data();
        if (tv.dims.size() == 2) {
            Eigen::Map<MatrixXd> m(tv.data, tv.dims[0], tv.dims[1]);
            for (int r = 0; r < tv.dims[0]; ++r)
                for (int c = 0; c < tv.dims[1]; ++c) {
                    float f;
                    std::memcpy(&f, p, 4);
                    p += 4;
                    m(r, c) = static_cast<double>(f);
                }
        } else {
            for (long i = 0; i < tv.size(); ++i) {
                float f;
                std::memcpy(&f, p, 4);
                p += 4;
                tv.data[i] = static_cast<double>(f);
            }
        }
    }
    if (rd.off != bytes.size()) throw FormatError("checkpoint: trailing bytes");
    return {std::move(net), std::move(meta)};
}

void save_checkpoint(const std::string& path, const DenseNet& net, const CheckpointMeta& meta) {
    std::string blob = serialize_checkpoint(net, meta);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw FormatError("short write: " + path);
}

std::pair<DenseNet, CheckpointMeta> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace stg
