#pragma once

// Frame ingestion and image codecs: PPM (P6), PNG (libpng), and the CVR1
// raw video container (magic "CVR1", u32 width, u32 height, u32 frame
// count, packed RGB24 frames, little-endian).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "cova/core.hpp"
#include "cova/image.hpp"

namespace cova {

struct DecodeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- PPM (P6)

inline void write_ppm(const std::filesystem::path& path, const Frame& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << "P6\n" << f.width << " " << f.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(f.pixels.data()),
             static_cast<std::streamsize>(f.pixels.size()));
}

inline Frame read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DecodeError("cannot open: " + path.string());
    std::string magic;
    is >> magic;
    if (magic != "P6") throw DecodeError("not a P6 PPM: " + path.string());
    auto next_token = [&]() -> int {
        // Skips whitespace and '#' comments.
        for (;;) {
            int c = is.peek();
            if (c == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        int v;
        if (!(is >> v)) throw DecodeError("bad PPM header: " + path.string());
        return v;
    };
    Frame f;
    f.width = next_token();
    f.height = next_token();
    const int maxval = next_token();
    if (maxval != 255 || f.width <= 0 || f.height <= 0)
        throw DecodeError("unsupported PPM: " + path.string());
    is.get();  // single whitespace after maxval
    f.pixels.resize(static_cast<std::size_t>(f.width) * f.height * 3);
    is.read(reinterpret_cast<char*>(f.pixels.data()),
            static_cast<std::streamsize>(f.pixels.size()));
    if (is.gcount() != static_cast<std::streamsize>(f.pixels.size()))
        throw DecodeError("truncated PPM: " + path.string());
    return f;
}

// ------------------------------------------------------------------- PNG

inline std::vector<std::uint8_t> encode_png(const Frame& f) {
    if (!f.valid()) throw std::invalid_argument("encode_png: invalid frame");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::vector<std::uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG encode failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
            buf->insert(buf->end(), data, data + len);
        },
        nullptr);
    png_set_IHDR(png, info, f.width, f.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < f.height; ++y)
        png_write_row(png, const_cast<png_bytep>(
                               f.pixels.data() + static_cast<std::size_t>(y) * f.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline Frame decode_png(const std::uint8_t* data, std::size_t size) {
    if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw DecodeError("not a PNG");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    Frame f;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("PNG decode failed");
    }
    struct Reader {
        const std::uint8_t* data;
        std::size_t size;
        std::size_t pos;
    } reader{data, size, 0};
    png_set_read_fn(png, &reader, [](png_structp p, png_bytep out, png_size_t len) {
        auto* r = static_cast<Reader*>(png_get_io_ptr(p));
        if (r->pos + len > r->size) png_error(p, "truncated PNG");
        std::memcpy(out, r->data + r->pos, len);
        r->pos += len;
    });
    png_read_info(png, info);
    // Normalize every input to 8-bit RGB.
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    f.width = static_cast<int>(png_get_image_width(png, info));
    f.height = static_cast<int>(png_get_image_height(png, info));
    f.pixels.resize(static_cast<std::size_t>(f.width) * f.height * 3);
    for (int y = 0; y < f.height; ++y)
        png_read_row(png, f.pixels.data() + static_cast<std::size_t>(y) * f.width * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return f;
}

inline Frame decode_png(const std::vector<std::uint8_t>& bytes) {
    return decode_png(bytes.data(), bytes.size());
}

inline void write_png(const std::filesystem::path& path, const Frame& f) {
    const auto bytes = encode_png(f);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

inline Frame read_png(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DecodeError("cannot open: " + path.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(is),
                                    std::istreambuf_iterator<char>()};
    return decode_png(bytes);
}

inline Frame read_image(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".ppm") return read_ppm(path);
    if (ext == ".png") return read_png(path);
    throw DecodeError("unsupported image format: " + path.string());
}

// ----------------------------------------------------------- CVR1 container

inline void write_raw_video(const std::filesystem::path& path,
                            const std::vector<Frame>& frames) {
    if (frames.empty()) throw std::invalid_argument("write_raw_video: no frames");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os.write("CVR1", 4);
    auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(static_cast<std::uint32_t>(frames[0].width));
    put_u32(static_cast<std::uint32_t>(frames[0].height));
    put_u32(static_cast<std::uint32_t>(frames.size()));
    for (const auto& f : frames) {
        if (f.width != frames[0].width || f.height != frames[0].height)
            throw std::invalid_argument("write_raw_video: mixed frame sizes");
        os.write(reinterpret_cast<const char*>(f.pixels.data()),
                 static_cast<std::streamsize>(f.pixels.size()));
    }
}

// ------------------------------------------------------------- FrameSource

enum class SourceKind { ImageDirectory, RawVideoFile };

struct FrameSourceConfig {
    SourceKind kind = SourceKind::ImageDirectory;
    std::filesystem::path path;
    double frame_rate_hint = 30.0;
    bool loop = false;
};

// Delivers frames with monotonically increasing indices. Corrupt items are
// reported through on_item_error and skipped; the stream continues.
class FrameSource {
public:
    using ErrorHandler = std::function<void(const std::string&)>;

    explicit FrameSource(FrameSourceConfig cfg, ErrorHandler on_item_error = nullptr)
        : cfg_(std::move(cfg)), on_item_error_(std::move(on_item_error)) {
        if (!std::filesystem::exists(cfg_.path))
            throw std::runtime_error("source path does not exist: " + cfg_.path.string());
        if (cfg_.kind == SourceKind::ImageDirectory) {
            for (const auto& e : std::filesystem::directory_iterator(cfg_.path)) {
                if (!e.is_regular_file()) continue;
                const auto ext = e.path().extension().string();
                if (ext == ".png" || ext == ".ppm") files_.push_back(e.path());
            }
            std::sort(files_.begin(), files_.end());
        } else {
            video_.open(cfg_.path, std::ios::binary);
            char magic[4];
            video_.read(magic, 4);
            if (!video_ || std::memcmp(magic, "CVR1", 4) != 0)
                throw std::runtime_error("not a CVR1 file: " + cfg_.path.string());
            auto get_u32 = [&] {
                std::uint32_t v = 0;
                video_.read(reinterpret_cast<char*>(&v), 4);
                return v;
            };
            video_w_ = static_cast<int>(get_u32());
            video_h_ = static_cast<int>(get_u32());
            video_count_ = get_u32();
            if (!video_ || video_w_ <= 0 || video_h_ <= 0)
                throw std::runtime_error("bad CVR1 header: " + cfg_.path.string());
        }
    }

    // nullopt = end of stream.
    std::optional<Frame> next_frame() {
        for (;;) {
            auto f = next_raw();
            if (!f) return std::nullopt;
            f->stream_id = cfg_.path.string();
            f->index = next_index_++;
            f->timestamp_ms = static_cast<std::int64_t>(
                1000.0 * double(f->index) / cfg_.frame_rate_hint);
            return f;
        }
    }

private:
    std::optional<Frame> next_raw() {
        if (cfg_.kind == SourceKind::ImageDirectory) {
            while (true) {
                if (file_pos_ >= files_.size()) {
                    if (cfg_.loop && !files_.empty())
                        file_pos_ = 0;
                    else
                        return std::nullopt;
                }
                const auto& path = files_[file_pos_++];
                try {
                    Frame f = read_image(path);
                    f.name = path.filename().string();
                    return f;
                } catch (const DecodeError& e) {
                    if (on_item_error_) on_item_error_(e.what());
                    continue;  // skip and carry on
                }
            }
        }
        if (video_pos_ >= video_count_) {
            if (!cfg_.loop) return std::nullopt;
            video_.clear();
            video_.seekg(16);
            video_pos_ = 0;
        }
        Frame f;
        f.name = cfg_.path.stem().string() + "#" + std::to_string(video_pos_);
        f.width = video_w_;
        f.height = video_h_;
        f.pixels.resize(static_cast<std::size_t>(video_w_) * video_h_ * 3);
        video_.read(reinterpret_cast<char*>(f.pixels.data()),
                    static_cast<std::streamsize>(f.pixels.size()));
        if (video_.gcount() != static_cast<std::streamsize>(f.pixels.size())) {
            if (on_item_error_) on_item_error_("truncated CVR1 frame");
            return std::nullopt;
        }
        ++video_pos_;
        return f;
    }

    FrameSourceConfig cfg_;
    ErrorHandler on_item_error_;
    std::vector<std::filesystem::path> files_;
    std::size_t file_pos_ = 0;
    std::int64_t next_index_ = 0;
    std::ifstream video_;
    int video_w_ = 0;
    int video_h_ = 0;
    std::uint32_t video_count_ = 0;
    std::uint32_t video_pos_ = 0;
};

}  // namespace cova
