#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "coda/grid.hpp"

namespace coda {

// ---------- raw file helpers ----------

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw std::runtime_error("short read: " + path);
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("short write: " + path);
}

inline std::string read_file_text(const std::string& path) {
    auto b = read_file_bytes(path);
    return std::string(b.begin(), b.end());
}

inline void write_file_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(text.data(), std::streamsize(text.size()));
    if (!f) throw std::runtime_error("short write: " + path);
}

namespace detail {

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v & 0xff));
    out.push_back(std::uint8_t((v >> 8) & 0xff));
    out.push_back(std::uint8_t((v >> 16) & 0xff));
    out.push_back(std::uint8_t((v >> 24) & 0xff));
}

inline void put_f32le(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32le(out, v);
}

// Cursor over a byte buffer with bounds-checked little-endian reads.
struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    std::string what;  // for error messages

    bool eof() const { return pos >= buf.size(); }

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error(what + ": truncated at byte " + std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::uint32_t u32le() {
        need(4);
        std::uint32_t v = std::uint32_t(buf[pos]) | (std::uint32_t(buf[pos + 1]) << 8) |
                          (std::uint32_t(buf[pos + 2]) << 16) |
                          (std::uint32_t(buf[pos + 3]) << 24);
        pos += 4;
        return v;
    }
    float f32le() {
        std::uint32_t v = u32le();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    void bytes(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
};

}  // namespace detail

// ---------- DMAP: density map container ----------
// magic `DMAP`, u32 LE height, u32 LE width, then H*W f32 LE row-major.

inline void write_dmap(const std::string& path, const Grid<float>& map) {
    if (map.shape.n != 1 || map.shape.c != 1)
        throw std::invalid_argument("write_dmap: expected a single 1-channel map, got " +
                                    map.shape.str());
    std::vector<std::uint8_t> out;
    out.reserve(12 + map.data.size() * 4);
    out.insert(out.end(), {'D', 'M', 'A', 'P'});
    detail::put_u32le(out, std::uint32_t(map.shape.h));
    detail::put_u32le(out, std::uint32_t(map.shape.w));
    for (float v : map.data) detail::put_f32le(out, v);
    write_file_bytes(path, out);
}

inline Grid<float> read_dmap(const std::string& path) {
    auto buf = read_file_bytes(path);
    detail::ByteReader r{buf, 0, "DMAP " + path};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "DMAP", 4) != 0)
        throw std::runtime_error("DMAP " + path + ": bad magic");
    std::uint32_t h = r.u32le();
    std::uint32_t w = r.u32le();
    if (h < 1 || w < 1 || h > (1u << 24) || w > (1u << 24))
        throw std::runtime_error("DMAP " + path + ": implausible dims");
    Grid<float> g(Shape{1, 1, int(h), int(w)});
    r.need(std::size_t(h) * w * 4);
    for (auto& v : g.data) v = r.f32le();
    if (r.pos != buf.size()) throw std::runtime_error("DMAP " + path + ": trailing bytes");
    return g;
}

// ---------- CKPT: named-array checkpoint ----------
// magic `CKPT`, u32 version, then repeated to EOF:
//   u32 name_len, name bytes, u32 rank, rank×u32 dims, f32 values.

struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'C', 'K', 'P', 'T'});
    detail::put_u32le(out, 1);  // version
    for (const auto& a : arrays) {
        if (a.values.size() != a.numel())
            throw std::invalid_argument("save_checkpoint: array '" + a.name +
                                        "' value count does not match dims");
        detail::put_u32le(out, std::uint32_t(a.name.size()));
        out.insert(out.end(), a.name.begin(), a.name.end());
        detail::put_u32le(out, std::uint32_t(a.dims.size()));
        for (auto d : a.dims) detail::put_u32le(out, d);
        for (float v : a.values) detail::put_f32le(out, v);
    }
    write_file_bytes(path, out);
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
    auto buf = read_file_bytes(path);
    detail::ByteReader r{buf, 0, "CKPT " + path};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "CKPT", 4) != 0)
        throw std::runtime_error("CKPT " + path + ": bad magic");
    std::uint32_t version = r.u32le();
    if (version != 1)
        throw std::runtime_error("CKPT " + path + ": unsupported version " +
                                 std::to_string(version));
    std::vector<NamedArray> arrays;
    while (!r.eof()) {
        NamedArray a;
        std::uint32_t name_len = r.u32le();
        if (name_len > 4096) throw std::runtime_error("CKPT " + path + ": implausible name length");
        a.name.resize(name_len);
        r.bytes(a.name.data(), name_len);
        std::uint32_t rank = r.u32le();
        if (rank > 8) throw std::runtime_error("CKPT " + path + ": implausible rank");
        a.dims.resize(rank);
        std::size_t n = 1;
        for (auto& d : a.dims) {
            d = r.u32le();
            n *= d;
        }
        a.values.resize(n);
        for (auto& v : a.values) v = r.f32le();
        arrays.push_back(std::move(a));
    }
    return arrays;
}

// ---------- 8-bit images (PGM and PNG) ----------

struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 = gray, 3 = RGB
    std::vector<std::uint8_t> pix;  // row-major, interleaved
};

// PGM/PPM binary variants, maxval 255.
inline ImageU8 read_pnm(const std::string& path) {
    auto buf = read_file_bytes(path);
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        // skip whitespace and '#' comments
        while (pos < buf.size()) {
            if (std::isspace(buf[pos])) {
                ++pos;
            } else if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        std::string tok;
        while (pos < buf.size() && !std::isspace(buf[pos])) tok.push_back(char(buf[pos++]));
        if (tok.empty()) throw std::runtime_error("PNM " + path + ": truncated header");
        return tok;
    };
    std::string magic = next_token();
    int channels;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw std::runtime_error("PNM " + path + ": unsupported magic '" + magic + "'");
    ImageU8 img;
    img.channels = channels;
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    int maxval = std::stoi(next_token());
    if (img.width < 1 || img.height < 1)
        throw std::runtime_error("PNM " + path + ": bad dimensions");
    if (maxval != 255) throw std::runtime_error("PNM " + path + ": only maxval 255 supported");
    ++pos;  // single whitespace after maxval
    std::size_t n = std::size_t(img.width) * img.height * channels;
    if (pos + n > buf.size()) throw std::runtime_error("PNM " + path + ": truncated pixel data");
    img.pix.assign(buf.begin() + std::ptrdiff_t(pos), buf.begin() + std::ptrdiff_t(pos + n));
    return img;
}

inline void write_pgm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1) throw std::invalid_argument("write_pgm: grayscale only");
    std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pix.begin(), img.pix.end());
    write_file_bytes(path, out);
}

namespace detail {

inline void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t((v >> 24) & 0xff));
    out.push_back(std::uint8_t((v >> 16) & 0xff));
    out.push_back(std::uint8_t((v >> 8) & 0xff));
    out.push_back(std::uint8_t(v & 0xff));
}

inline std::uint32_t get_u32be(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
    put_u32be(out, std::uint32_t(data.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uLong crc = crc32(0L, out.data() + crc_start, uInt(4 + data.size()));
    put_u32be(out, std::uint32_t(crc));
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

// Minimal PNG writer: 8-bit gray or RGB, non-interlaced, filter 0 rows.
inline void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: 1 or 3 channels only");
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_png: empty image");
    if (img.pix.size() != std::size_t(img.width) * img.height * img.channels)
        throw std::invalid_argument("write_png: pixel buffer size mismatch");

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

    std::vector<std::uint8_t> ihdr;
    detail::put_u32be(ihdr, std::uint32_t(img.width));
    detail::put_u32be(ihdr, std::uint32_t(img.height));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);            // color type
    ihdr.push_back(0);                                    // compression
    ihdr.push_back(0);                                    // filter method
    ihdr.push_back(0);                                    // interlace
    detail::png_chunk(out, "IHDR", ihdr);

    const std::size_t stride = std::size_t(img.width) * img.channels;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * std::size_t(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: None
        const std::uint8_t* row = img.pix.data() + std::size_t(y) * stride;
        raw.insert(raw.end(), row, row + stride);
    }
    uLongf comp_len = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png: deflate failed");
    comp.resize(comp_len);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", {});
    write_file_bytes(path, out);
}

// Minimal PNG reader: 8-bit gray or RGB, non-interlaced; all 5 row filters.
inline ImageU8 read_png(const std::string& path) {
    auto buf = read_file_bytes(path);
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw std::runtime_error("PNG " + path + ": bad signature");

    ImageU8 img;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    bool saw_end = false;
    while (pos + 8 <= buf.size() && !saw_end) {
        std::uint32_t len = detail::get_u32be(buf.data() + pos);
        if (pos + 12 + len > buf.size()) throw std::runtime_error("PNG " + path + ": truncated");
        const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
        const std::uint8_t* data = buf.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("PNG " + path + ": bad IHDR");
            img.width = int(detail::get_u32be(data));
            img.height = int(detail::get_u32be(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("PNG " + path + ": interlace unsupported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_end = true;
        }  // ancillary chunks skipped
        pos += 12 + len;
    }
    if (img.width < 1 || img.height < 1 || !saw_end)
        throw std::runtime_error("PNG " + path + ": malformed");
    if (bit_depth != 8 || (color_type != 0 && color_type != 2))
        throw std::runtime_error("PNG " + path + ": only 8-bit gray/RGB supported");
    img.channels = color_type == 0 ? 1 : 3;

    const std::size_t stride = std::size_t(img.width) * img.channels;
    const std::size_t raw_len = (stride + 1) * std::size_t(img.height);
    std::vector<std::uint8_t> raw(raw_len);
    uLongf dest_len = uLongf(raw_len);
    if (uncompress(raw.data(), &dest_len, idat.data(), uLong(idat.size())) != Z_OK ||
        dest_len != raw_len)
        throw std::runtime_error("PNG " + path + ": inflate failed");

    img.pix.assign(stride * std::size_t(img.height), 0);
    const int bpp = img.channels;
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t* src = raw.data() + std::size_t(y) * (stride + 1);
        std::uint8_t* dst = img.pix.data() + std::size_t(y) * stride;
        const std::uint8_t* prev = y > 0 ? dst - stride : nullptr;
        const std::uint8_t filter = src[0];
        ++src;
        for (std::size_t x = 0; x < stride; ++x) {
            int a = x >= std::size_t(bpp) ? dst[x - bpp] : 0;
            int b = prev ? prev[x] : 0;
            int c = (prev && x >= std::size_t(bpp)) ? prev[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw std::runtime_error("PNG " + path + ": bad filter byte");
            }
            dst[x] = std::uint8_t(v & 0xff);
        }
    }
    return img;
}

// Reads PNG or PGM/PPM by extension.
inline ImageU8 read_image(const std::string& path) {
    auto dot = path.rfind('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    for (auto& ch : ext) ch = char(std::tolower(ch));
    if (ext == "png") return read_png(path);
    if (ext == "pgm" || ext == "ppm" || ext == "pnm") return read_pnm(path);
    throw std::runtime_error("read_image: unsupported extension on " + path);
}

// Image pixels as a 1×C×H×W grid scaled to [0,1].
template <typename T = float>
Grid<T> image_to_grid(const ImageU8& img) {
    Grid<T> g(Shape{1, img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c) {
        T* plane = g.plane(0, c);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                plane[std::size_t(y) * img.width + x] =
                    T(img.pix[(std::size_t(y) * img.width + x) * img.channels + c]) / T(255);
    }
    return g;
}

// ---------- point annotations (JSON) ----------

struct PointAnnotation {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::vector<std::array<double, 2>> points;  // (x, y), half-open bounds
    std::string roi_path;                       // optional 8-bit PGM mask; empty = none

    bool operator==(const PointAnnotation&) const = default;
};

inline void validate_annotation(const PointAnnotation& a, const std::string& where) {
    if (a.width < 1 || a.height < 1)
        throw std::runtime_error(where + ": width/height must be >= 1");
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        double x = a.points[i][0], y = a.points[i][1];
        if (!(x >= 0.0 && x < double(a.width) && y >= 0.0 && y < double(a.height)))
            throw std::runtime_error(where + ".points[" + std::to_string(i) + "]: (" +
                                     std::to_string(x) + ", " + std::to_string(y) +
                                     ") outside [0," + std::to_string(a.width) + ")x[0," +
                                     std::to_string(a.height) + ")");
    }
}

inline std::vector<PointAnnotation> load_annotations(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("annotations " + path + ": " + e.what());
    }
    if (!j.is_array()) throw std::runtime_error("annotations " + path + ": top level must be an array");
    std::vector<PointAnnotation> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string where = path + ": annotations[" + std::to_string(i) + "]";
        const auto& e = j[i];
        if (!e.is_object()) throw std::runtime_error(where + ": must be an object");
        PointAnnotation a;
        try {
            a.image_id = e.at("image_id").get<std::string>();
            a.width = e.at("width").get<int>();
            a.height = e.at("height").get<int>();
            for (const auto& p : e.at("points")) {
                if (!p.is_array() || p.size() != 2)
                    throw std::runtime_error("each point must be [x, y]");
                a.points.push_back({p[0].get<double>(), p[1].get<double>()});
            }
            if (e.contains("roi")) a.roi_path = e.at("roi").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            throw std::runtime_error(where + ": " + ex.what());
        } catch (const std::runtime_error& ex) {
            throw std::runtime_error(where + ": " + ex.what());
        }
        validate_annotation(a, where);
        out.push_back(std::move(a));
    }
    return out;
}

inline void save_annotations(const std::vector<PointAnnotation>& anns, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t i = 0; i < anns.size(); ++i) {
        validate_annotation(anns[i], "annotations[" + std::to_string(i) + "]");
        nlohmann::json e;
        e["image_id"] = anns[i].image_id;
        e["width"] = anns[i].width;
        e["height"] = anns[i].height;
        auto pts = nlohmann::json::array();
        for (const auto& p : anns[i].points) pts.push_back({p[0], p[1]});
        e["points"] = std::move(pts);
        if (!anns[i].roi_path.empty()) e["roi"] = anns[i].roi_path;
        j.push_back(std::move(e));
    }
    write_file_text(path, j.dump(2) + "\n");
}

}  // namespace coda
