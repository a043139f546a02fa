// SPDX-License-Identifier: Apache-2.0
#include "sop2/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace sop2 {

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    // little-endian encode
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
}

struct Reader {
    const std::uint8_t* p;
    std::size_t len;
    std::size_t pos = 0;

    template <typename T>
    T get() {
        if (pos + sizeof(T) > len) throw DataError("checkpoint: truncated file");
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        }
        pos += sizeof(T);
        return static_cast<T>(v);
    }
    std::string get_string(std::size_t n) {
        if (pos + n > len) throw DataError("checkpoint: truncated file");
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

std::size_t shape_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

}  // namespace

const CheckpointEntry* CheckpointData::find(const std::string& name) const {
    for (const CheckpointEntry& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::vector<std::uint8_t> checkpoint_serialize(const CheckpointData& data) {
    std::set<std::string> seen;
    for (const CheckpointEntry& e : data.entries) {
        if (!seen.insert(e.name).second) {
            throw DataError("checkpoint: duplicate tensor name '" + e.name + "'");
        }
        if (shape_count(e.shape) != e.values.size()) {
            throw DimensionError("checkpoint: entry '" + e.name + "' shape/value mismatch");
        }
    }

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, data.config_text.size());
    out.insert(out.end(), data.config_text.begin(), data.config_text.end());

    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.entries.size()));
    std::uint64_t offset = 0;
    for (const CheckpointEntry& e : data.entries) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        put<std::uint64_t>(out, offset);
        offset += e.values.size() * sizeof(float);
    }
    put<std::uint64_t>(out, offset);
    for (const CheckpointEntry& e : data.entries) {
        for (float v : e.values) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            put<std::uint32_t>(out, bits);
        }
    }
    return out;
}

CheckpointData checkpoint_parse(const std::uint8_t* bytes, std::size_t len) {
    Reader r{bytes, len};
    const std::string magic = r.get_string(8);
    if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) {
        throw DataError("checkpoint: bad magic, not a SOP2CKPT container");
    }
    const std::uint32_t version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    CheckpointData data;
    const std::uint64_t config_len = r.get<std::uint64_t>();
    data.config_text = r.get_string(config_len);

    const std::uint32_t count = r.get<std::uint32_t>();
    std::vector<std::uint64_t> offsets;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const std::uint32_t name_len = r.get<std::uint32_t>();
        e.name = r.get_string(name_len);
        if (!seen.insert(e.name).second) {
            throw DataError("checkpoint: duplicate tensor name '" + e.name + "'");
        }
        const std::uint32_t ndim = r.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<int>(r.get<std::uint64_t>()));
        }
        offsets.push_back(r.get<std::uint64_t>());
        data.entries.push_back(std::move(e));
    }
    const std::uint64_t payload_len = r.get<std::uint64_t>();
    if (r.pos + payload_len > len) throw DataError("checkpoint: truncated payload");

    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < data.entries.size(); ++i) {
        CheckpointEntry& e = data.entries[i];
        const std::size_t n = shape_count(e.shape);
        if (offsets[i] != expected_offset) {
            throw DataError("checkpoint: overlapping or out-of-order payload offsets");
        }
        if (offsets[i] + n * sizeof(float) > payload_len) {
            throw DataError("checkpoint: entry '" + e.name + "' exceeds payload");
        }
        e.values.resize(n);
        std::memcpy(e.values.data(), bytes + r.pos + offsets[i], n * sizeof(float));
        expected_offset += n * sizeof(float);
    }
    return data;
}

void checkpoint_write_file(const std::string& path, const CheckpointData& data) {
    const std::vector<std::uint8_t> bytes = checkpoint_serialize(data);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("short write to '" + path + "'");
}

CheckpointData checkpoint_read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return checkpoint_parse(bytes.data(), bytes.size());
}

CheckpointData checkpoint_from_params(const std::string& config_text,
                                      const std::vector<NamedParam>& params) {
    CheckpointData data;
    data.config_text = config_text;
    for (const NamedParam& p : params) {
        CheckpointEntry e;
        e.name = p.name;
        e.shape = p.tensor.shape();
        e.values.reserve(p.tensor.numel());
        for (double v : p.tensor.data()) e.values.push_back(static_cast<float>(v));
        data.entries.push_back(std::move(e));
    }
    return data;
}

LoadStats checkpoint_load_params(const CheckpointData& data, std::vector<NamedParam>& params) {
    LoadStats stats;
    std::set<std::string> model_names;
    for (const NamedParam& p : params) model_names.insert(p.name);
    for (const CheckpointEntry& e : data.entries) {
        if (!model_names.count(e.name)) {
            throw DataError("checkpoint tensor '" + e.name + "' has no matching model parameter");
        }
    }
    for (NamedParam& p : params) {
        const CheckpointEntry* e = data.find(p.name);
        if (!e) {
            ++stats.fresh;
            continue;
        }
        if (e->shape != p.tensor.shape()) {
            throw DataError("checkpoint tensor '" + p.name + "' shape " +
                            Tensor::shape_str(e->shape) + " vs model " +
                            Tensor::shape_str(p.tensor.shape()));
        }
        for (std::size_t i = 0; i < e->values.size(); ++i) {
            p.tensor.data()[i] = static_cast<double>(e->values[i]);
        }
        ++stats.loaded;
    }
    return stats;
}

CheckpointData archive_from_scenes(const std::string& config_text,
                                   const std::vector<Scene>& scenes, const Extent& extent) {
    (void)extent;
    CheckpointData data;
    data.config_text = config_text;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Scene& s = scenes[i];
        CheckpointEntry pts;
        pts.name = "scene" + std::to_string(i) + ".points";
        pts.shape = {static_cast<int>(s.pc.points.size()), 4};
        for (const Point& p : s.pc.points) {
            pts.values.push_back(static_cast<float>(p.x));
            pts.values.push_back(static_cast<float>(p.y));
            pts.values.push_back(static_cast<float>(p.z));
            pts.values.push_back(static_cast<float>(p.intensity));
        }
        data.entries.push_back(std::move(pts));

        CheckpointEntry boxes;
        boxes.name = "scene" + std::to_string(i) + ".boxes";
        boxes.shape = {static_cast<int>(s.label.boxes.size()), 6};
        for (const Box& b : s.label.boxes) {
            boxes.values.push_back(static_cast<float>(b.cx));
            boxes.values.push_back(static_cast<float>(b.cy));
            boxes.values.push_back(static_cast<float>(b.length));
            boxes.values.push_back(static_cast<float>(b.width));
            boxes.values.push_back(static_cast<float>(b.yaw));
            boxes.values.push_back(static_cast<float>(b.cls));
        }
        data.entries.push_back(std::move(boxes));
    }
    return data;
}

std::vector<Scene> scenes_from_archive(const CheckpointData& data, const Extent& extent) {
    std::vector<Scene> scenes;
    for (std::size_t i = 0;; ++i) {
        const CheckpointEntry* pts = data.find("scene" + std::to_string(i) + ".points");
        const CheckpointEntry* boxes = data.find("scene" + std::to_string(i) + ".boxes");
        if (!pts || !boxes) break;
        Scene s;
        s.pc.extent = extent;
        for (std::size_t r = 0; r + 4 <= pts->values.size(); r += 4) {
            s.pc.points.push_back({pts->values[r], pts->values[r + 1], pts->values[r + 2],
                                   pts->values[r + 3]});
        }
        for (std::size_t r = 0; r + 6 <= boxes->values.size(); r += 6) {
            Box b;
            b.cx = boxes->values[r];
            b.cy = boxes->values[r + 1];
            b.length = boxes->values[r + 2];
            b.width = boxes->values[r + 3];
            b.yaw = boxes->values[r + 4];
            b.cls = static_cast<int>(boxes->values[r + 5]);
            s.label.boxes.push_back(b);
        }
        scenes.push_back(std::move(s));
    }
    if (scenes.empty()) throw DataError("archive holds no scenes");
    return scenes;
}

}  // namespace sop2
