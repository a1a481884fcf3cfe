#include "iceseg/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace iceseg {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "scene container format is little-endian only");

RasterScene RasterScene::blank(std::string id, int width, int height, float spacing_m,
                               bool with_labels) {
    RasterScene s;
    s.id = std::move(id);
    s.width = width;
    s.height = height;
    s.pixel_spacing_m = spacing_m;
    for (const char* name : kChannelNames) {
        s.channel_names.emplace_back(name);
        s.channels.emplace_back(static_cast<std::size_t>(s.pixels()), 0.0f);
    }
    s.valid_mask.assign(static_cast<std::size_t>(s.pixels()), 1);
    if (with_labels) s.labels.assign(static_cast<std::size_t>(s.pixels()), kIgnoreLabel);
    return s;
}

ClassScheme ClassScheme::from_name(const std::string& name) {
    if (name == "ice_water") return ice_water();
    if (name == "oldest_type") return oldest_type();
    if (name == "dominant_type") return dominant_type();
    fail("unknown class scheme '" + name + "' (expected ice_water|oldest_type|dominant_type)");
}

const char* ClassScheme::name() const {
    switch (target) {
        case SchemeTarget::IceWater: return "ice_water";
        case SchemeTarget::OldestType: return "oldest_type";
        case SchemeTarget::DominantType: return "dominant_type";
    }
    return "?";
}

std::vector<std::string> ClassScheme::class_names() const {
    if (target == SchemeTarget::IceWater) return {"Water", "Ice"};
    return {"Water", "NewIce", "Nilas", "YoungIce", "FirstYearIce", "OldIce"};
}

// ---- container i/o -------------------------------------------------------------

namespace {

template <typename T>
std::vector<T> read_plane(const std::filesystem::path& path, std::int64_t count) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open plane file " + path.string());
    std::vector<T> v(static_cast<std::size_t>(count));
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(T))));
    require(f.gcount() == static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(T))),
            "truncated payload in " + path.string() + ": expected " +
                std::to_string(count * static_cast<std::int64_t>(sizeof(T))) + " bytes");
    char extra;
    f.read(&extra, 1);
    require(f.eof(), "plane file " + path.string() + " is longer than the header promises");
    return v;
}

template <typename T>
void write_plane(const std::filesystem::path& path, const std::vector<T>& v) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot write plane file " + path.string());
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
    require(f.good(), "short write on " + path.string());
}

}  // namespace

RasterScene load_scene(const std::filesystem::path& dir) {
    std::ifstream hf(dir / "header");
    require(hf.good(), "missing scene header in " + dir.string());
    json h = json::parse(hf);

    RasterScene s;
    s.id = dir.filename().string();
    s.width = h.at("width").get<int>();
    s.height = h.at("height").get<int>();
    s.pixel_spacing_m = h.at("pixel_spacing_m").get<float>();
    require(h.at("byte_order").get<std::string>() == "little-endian",
            "scene " + s.id + ": unsupported byte order");
    if (h.contains("provenance")) s.provenance = h["provenance"].get<std::vector<std::string>>();

    const std::int64_t n = s.pixels();
    require(n > 0, "scene " + s.id + ": non-positive dimensions");

    for (const auto& name : h.at("channels")) {
        const std::string cn = name.get<std::string>();
        const bool known = cn == kChannelNames[0] || cn == kChannelNames[1] || cn == kChannelNames[2];
        require(known, "scene " + s.id + ": unknown channel name '" + cn + "'");
        s.channel_names.push_back(cn);
        s.channels.push_back(read_plane<float>(dir / cn, n));
    }
    s.valid_mask = read_plane<std::uint8_t>(dir / "mask", n);
    if (h.at("has_labels").get<bool>()) s.labels = read_plane<std::uint8_t>(dir / "labels", n);

    // NaN anywhere in a channel invalidates the pixel; invalid values are zeroed
    for (std::int64_t i = 0; i < n; ++i) {
        bool ok = s.valid_mask[static_cast<std::size_t>(i)] != 0;
        for (auto& ch : s.channels)
            if (!std::isfinite(ch[static_cast<std::size_t>(i)])) ok = false;
        if (!ok) {
            s.valid_mask[static_cast<std::size_t>(i)] = 0;
            for (auto& ch : s.channels) ch[static_cast<std::size_t>(i)] = 0.0f;
        }
    }
    return s;
}

void write_scene(const RasterScene& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json h;
    h["width"] = s.width;
    h["height"] = s.height;
    h["pixel_spacing_m"] = s.pixel_spacing_m;
    h["channels"] = s.channel_names;
    h["has_labels"] = s.has_labels();
    h["byte_order"] = "little-endian";
    h["dtype"] = {{"planes", "f32"}, {"labels", "u8"}};
    if (!s.provenance.empty()) h["provenance"] = s.provenance;

    std::ofstream hf(dir / "header");
    require(hf.good(), "cannot write header in " + dir.string());
    hf << h.dump(2) << "\n";

    for (std::size_t i = 0; i < s.channel_names.size(); ++i)
        write_plane(dir / s.channel_names[i], s.channels[i]);
    write_plane(dir / "mask", s.valid_mask);
    if (s.has_labels()) write_plane(dir / "labels", s.labels);
}

// ---- conversions -----------------------------------------------------------------

void to_decibels(std::vector<float>& plane, std::vector<std::uint8_t>& mask) {
    require(plane.size() == mask.size(), "to_decibels: plane/mask size mismatch");
    for (std::size_t i = 0; i < plane.size(); ++i) {
        if (!mask[i]) continue;
        if (plane[i] <= 0.0f) {  // outside the log domain: mask, not fail
            mask[i] = 0;
            plane[i] = 0.0f;
        } else {
            plane[i] = 10.0f * std::log10(plane[i]);
        }
    }
}

RasterScene convert_backscatter_to_db(RasterScene scene) {
    for (const char* name : {"hh_db", "hv_db"}) {
        const int i = scene.channel_index(name);
        require(i >= 0, "convert_backscatter_to_db: scene lacks channel " + std::string(name));
        to_decibels(scene.channels[static_cast<std::size_t>(i)], scene.valid_mask);
    }
    // pixels masked out by the log domain must be zeroed in every channel
    for (std::int64_t p = 0; p < scene.pixels(); ++p)
        if (!scene.valid_mask[static_cast<std::size_t>(p)])
            for (auto& ch : scene.channels) ch[static_cast<std::size_t>(p)] = 0.0f;
    return scene;
}

RasterScene downsample_2x(const RasterScene& in) {
    RasterScene out;
    out.id = in.id;
    out.width = in.width / 2;
    out.height = in.height / 2;
    out.pixel_spacing_m = in.pixel_spacing_m * 2.0f;
    out.channel_names = in.channel_names;
    out.provenance = in.provenance;
    if (in.width % 2 || in.height % 2)
        out.provenance.push_back("downsample_2x: dropped trailing row/col of odd-sized input");

    const std::int64_t n = out.pixels();
    out.valid_mask.assign(static_cast<std::size_t>(n), 0);
    for (const auto& _ : in.channels) {
        (void)_;
        out.channels.emplace_back(static_cast<std::size_t>(n), 0.0f);
    }
    if (in.has_labels()) out.labels.assign(static_cast<std::size_t>(n), kIgnoreLabel);

    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const std::size_t o = static_cast<std::size_t>(y) * out.width + x;
            const std::size_t i00 = static_cast<std::size_t>(2 * y) * in.width + 2 * x;
            const std::size_t blk[4] = {i00, i00 + 1, i00 + static_cast<std::size_t>(in.width),
                                        i00 + static_cast<std::size_t>(in.width) + 1};
            int valid = 0;
            for (std::size_t b : blk) valid += in.valid_mask[b] ? 1 : 0;
            out.valid_mask[o] = valid > 0 ? 1 : 0;
            for (std::size_t c = 0; c < in.channels.size(); ++c) {
                if (valid == 0) continue;
                double s = 0.0;
                for (std::size_t b : blk)
                    if (in.valid_mask[b]) s += in.channels[c][b];
                out.channels[c][o] = static_cast<float>(s / valid);
            }
            if (in.has_labels()) {
                // majority vote over the block; ties break toward the lower code
                int count[256] = {};
                for (std::size_t b : blk) count[in.labels[b]]++;
                int best = 0, bestc = count[0];
                for (int v = 1; v < 256; ++v)
                    if (count[v] > bestc) {
                        best = v;
                        bestc = count[v];
                    }
                out.labels[o] = static_cast<std::uint8_t>(best);
            }
        }
    }
    return out;
}

// ---- polygon tables -----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

PolygonTable PolygonTable::read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), "cannot open polygon table " + path.string());
    std::string line;
    require(static_cast<bool>(std::getline(f, line)), "empty polygon table " + path.string());

    PolygonTable table;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        require(cells.size() >= 9, "polygon table " + path.string() + " line " +
                                       std::to_string(lineno) + ": expected 9 columns");
        PolygonRow row;
        const std::uint32_t id = static_cast<std::uint32_t>(std::stoul(cells[0]));
        require(table.rows.find(id) == table.rows.end(),
                "polygon table: duplicate id " + std::to_string(id));
        row.sa_code = cells[1].empty() ? 0 : std::stoi(cells[1]);
        for (int e = 0; e < 3; ++e) {
            const std::string& ts = cells[2 + 2 * e];
            const std::string& cs = cells[3 + 2 * e];
            if (ts.empty() && cs.empty()) continue;
            PolygonEntry entry{std::stoi(ts), std::stod(cs)};
            require(entry.conc_pct > 0.0 && entry.conc_pct <= 100.0,
                    "polygon " + std::to_string(id) + ": partial concentration " +
                        std::to_string(entry.conc_pct) + " outside (0,100]");
            require(entry.type >= NewIce && entry.type <= OldIce,
                    "polygon " + std::to_string(id) + ": bad ice type code " + ts);
            row.partials.push_back(entry);
        }
        row.total_conc_pct = std::stod(cells[8]);
        table.rows[id] = row;
    }
    return table;
}

void PolygonTable::write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), "cannot write polygon table " + path.string());
    f << "id,sa,type1,conc1,type2,conc2,type3,conc3,total_conc\n";
    for (const auto& [id, row] : rows) {
        f << id << "," << row.sa_code;
        for (int e = 0; e < 3; ++e) {
            if (e < static_cast<int>(row.partials.size()))
                f << "," << row.partials[static_cast<std::size_t>(e)].type << ","
                  << row.partials[static_cast<std::size_t>(e)].conc_pct;
            else
                f << ",,";
        }
        f << "," << row.total_conc_pct << "\n";
    }
}

std::vector<std::uint8_t> derive_labels(const PolygonIdRaster& ids, const PolygonTable& table,
                                        const ClassScheme& scheme, double ice_threshold_pct) {
    // verify id coverage up front so the error can list every missing id
    std::set<std::uint32_t> missing;
    for (std::uint32_t id : ids.v)
        if (id != kIgnorePolygonId && table.rows.find(id) == table.rows.end()) missing.insert(id);
    if (!missing.empty()) {
        std::ostringstream os;
        os << "derive_labels: polygon ids absent from table:";
        for (std::uint32_t id : missing) os << " " << id;
        fail(os.str());
    }

    std::vector<std::uint8_t> out(ids.v.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < ids.v.size(); ++i) {
        const std::uint32_t id = ids.v[i];
        if (id == kIgnorePolygonId) continue;
        const PolygonRow& row = table.rows.at(id);
        if (row.total_conc_pct < ice_threshold_pct) {
            out[i] = Water;
            continue;
        }
        switch (scheme.target) {
            case SchemeTarget::IceWater:
                out[i] = 1;
                break;
            case SchemeTarget::OldestType:
                require(row.sa_code >= NewIce && row.sa_code <= OldIce,
                        "derive_labels: polygon " + std::to_string(id) +
                            " has ice but an invalid SA code");
                out[i] = static_cast<std::uint8_t>(row.sa_code);
                break;
            case SchemeTarget::DominantType: {
                require(!row.partials.empty(), "derive_labels: polygon " + std::to_string(id) +
                                                   " has ice but no typed entries");
                int best = row.partials[0].type;
                double bestc = row.partials[0].conc_pct;
                for (const auto& e : row.partials) {
                    // largest partial concentration; ties go to the older type
                    if (e.conc_pct > bestc || (e.conc_pct == bestc && e.type > best)) {
                        best = e.type;
                        bestc = e.conc_pct;
                    }
                }
                out[i] = static_cast<std::uint8_t>(best);
                break;
            }
        }
    }
    return out;
}

// ---- normalization statistics ----------------------------------------------------------

NormStats compute_norm_stats(const std::vector<const RasterScene*>& scenes) {
    require(!scenes.empty(), "compute_norm_stats: need at least one scene");
    NormStats st;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sumsq = 0.0;
        std::int64_t count = 0;
        for (const RasterScene* s : scenes) {
            const std::vector<float>& plane = s->channel(kChannelNames[c]);
            for (std::int64_t i = 0; i < s->pixels(); ++i) {
                if (!s->valid_mask[static_cast<std::size_t>(i)]) continue;
                const double v = plane[static_cast<std::size_t>(i)];
                sum += v;
                sumsq += v * v;
                ++count;
            }
        }
        require(count > 0, "compute_norm_stats: no valid pixels in channel " +
                               std::string(kChannelNames[c]));
        const double mean = sum / static_cast<double>(count);
        const double var = std::max(0.0, sumsq / static_cast<double>(count) - mean * mean);
        require(var > 0.0, "compute_norm_stats: channel " + std::string(kChannelNames[c]) +
                               " has zero variance");
        st.mean[static_cast<std::size_t>(c)] = mean;
        st.stddev[static_cast<std::size_t>(c)] = std::sqrt(var);
    }
    for (const RasterScene* s : scenes) st.provenance.push_back(s->id);
    return st;
}

void save_norm_stats(const NormStats& st, const std::filesystem::path& path) {
    json j;
    j["mean"] = st.mean;
    j["stddev"] = st.stddev;
    j["provenance"] = st.provenance;
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), "cannot write norm stats " + path.string());
    f << j.dump(2) << "\n";
}

NormStats load_norm_stats(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), "cannot open norm stats " + path.string());
    json j = json::parse(f);
    NormStats st;
    st.mean = j.at("mean").get<std::array<double, 3>>();
    st.stddev = j.at("stddev").get<std::array<double, 3>>();
    st.provenance = j.at("provenance").get<std::vector<std::string>>();
    return st;
}

}  // namespace iceseg
