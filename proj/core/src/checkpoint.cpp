#include "ragdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ragdiff {

namespace {
constexpr char kMagic[8] = {'R', 'G', 'D', 'F', 'C', 'K', 'P', '1'};
constexpr uint32_t kVersion = 1;

const char* schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    raise_data("unknown schedule kind: " + s);
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    require((bool)out, kDataError, "cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    uint32_t version = kVersion;
    out.write((const char*)&version, 4);

    nlohmann::json j;
    j["arch"] = ckpt.arch.to_json();
    j["schedule"] = {{"kind", schedule_kind_name(ckpt.schedule.kind)},
                     {"T", ckpt.schedule.T},
                     {"beta_start", ckpt.schedule.beta_start},
                     {"beta_end", ckpt.schedule.beta_end}};
    j["step"] = ckpt.step;
    std::string desc = j.dump();
    uint64_t dlen = desc.size();
    out.write((const char*)&dlen, 8);
    out.write(desc.data(), (std::streamsize)desc.size());

    uint32_t n = (uint32_t)ckpt.params.size();
    out.write((const char*)&n, 4);
    for (const auto& [name, value] : ckpt.params) {
        uint32_t nl = (uint32_t)name.size();
        out.write((const char*)&nl, 4);
        out.write(name.data(), (std::streamsize)name.size());
        uint32_t rank = (uint32_t)value.shape.size();
        out.write((const char*)&rank, 4);
        for (int d : value.shape) {
            uint32_t dd = (uint32_t)d;
            out.write((const char*)&dd, 4);
        }
        out.write((const char*)value.ptr(), (std::streamsize)(sizeof(float) * (size_t)value.numel()));
    }
    require((bool)out, kDataError, "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise_missing("checkpoint not found: " + path);
    char magic[8];
    in.read(magic, 8);
    require(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0, kVersionError,
            "not a checkpoint file: " + path);
    uint32_t version = 0;
    in.read((char*)&version, 4);
    require(version == kVersion, kVersionError, "unsupported checkpoint version");

    uint64_t dlen = 0;
    in.read((char*)&dlen, 8);
    require((bool)in && dlen < (1ull << 24), kDataError, "corrupt checkpoint descriptor");
    std::string desc((size_t)dlen, '\0');
    in.read(desc.data(), (std::streamsize)dlen);
    require((bool)in, kDataError, "truncated checkpoint: " + path);

    Checkpoint ckpt;
    nlohmann::json j = nlohmann::json::parse(desc);
    ckpt.arch = ArchDescriptor::from_json(j.at("arch"));
    const auto& sj = j.at("schedule");
    int T = sj.at("T").get<int>();
    if (T > 0)
        ckpt.schedule = make_schedule(T, schedule_kind_from(sj.at("kind").get<std::string>()),
                                      sj.at("beta_start").get<double>(), sj.at("beta_end").get<double>());
    ckpt.step = j.at("step").get<int64_t>();

    uint32_t n = 0;
    in.read((char*)&n, 4);
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t nl = 0;
        in.read((char*)&nl, 4);
        require((bool)in && nl < 4096, kDataError, "corrupt checkpoint entry");
        std::string name((size_t)nl, '\0');
        in.read(name.data(), (std::streamsize)nl);
        uint32_t rank = 0;
        in.read((char*)&rank, 4);
        require((bool)in && rank <= 8, kDataError, "corrupt checkpoint entry");
        std::vector<int> shape;
        for (uint32_t r = 0; r < rank; ++r) {
            uint32_t d = 0;
            in.read((char*)&d, 4);
            shape.push_back((int)d);
        }
        Tensor<float> value(shape);
        in.read((char*)value.ptr(), (std::streamsize)(sizeof(float) * (size_t)value.numel()));
        require((bool)in, kDataError, "truncated checkpoint: " + path);
        ckpt.params.emplace_back(std::move(name), std::move(value));
    }
    return ckpt;
}

}  // namespace ragdiff
