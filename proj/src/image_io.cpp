#include "itarflow/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace itarflow {

uint8_t pixel_from_unit(float v) {
    float unit = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(unit * 255.0f));
}

void emit_image_grid(const std::vector<std::vector<float>>& samples, int64_t h, int64_t w,
                     int64_t c, int64_t rows, int64_t cols, const std::string& path) {
    if (c != 1 && c != 3)
        throw std::invalid_argument("emit_image_grid: channels must be 1 or 3, got " +
                                    std::to_string(c));
    if (static_cast<int64_t>(samples.size()) > rows * cols)
        throw std::invalid_argument("emit_image_grid: " + std::to_string(samples.size()) +
                                    " samples exceed a " + std::to_string(rows) + "x" +
                                    std::to_string(cols) + " grid");
    for (const auto& s : samples)
        if (static_cast<int64_t>(s.size()) != h * w * c)
            throw std::invalid_argument("emit_image_grid: sample size mismatch");

    const int64_t gutter = 2;
    int64_t out_h = rows * h + (rows + 1) * gutter;
    int64_t out_w = cols * w + (cols + 1) * gutter;
    std::vector<uint8_t> raster(out_h * out_w * c, 0);
    for (size_t k = 0; k < samples.size(); ++k) {
        int64_t gr = static_cast<int64_t>(k) / cols;
        int64_t gc = static_cast<int64_t>(k) % cols;
        int64_t top = gutter + gr * (h + gutter);
        int64_t left = gutter + gc * (w + gutter);
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < c; ++ch)
                    raster[((top + y) * out_w + left + x) * c + ch] =
                        pixel_from_unit(samples[k][(y * w + x) * c + ch]);
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write image");
    out << (c == 1 ? "P5" : "P6") << "\n" << out_w << " " << out_h << "\n255\n";
    out.write(reinterpret_cast<const char*>(raster.data()), raster.size());
}

void write_raster(const RasterImage& img, const std::string& path) {
    if (img.c != 1 && img.c != 3) throw std::invalid_argument("write_raster: channels must be 1 or 3");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write image");
    out << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
}

namespace {

int read_pnm_token(std::istream& in, const std::string& path) {
    // skips whitespace and # comments
    for (;;) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v)) throw std::runtime_error(path + ": malformed PNM header");
    return v;
}

}  // namespace

RasterImage read_raster(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open image");
    std::string magic;
    in >> magic;
    RasterImage img;
    if (magic == "P5") img.c = 1;
    else if (magic == "P6") img.c = 3;
    else throw std::runtime_error(path + ": unsupported format '" + magic + "' (want P5/P6)");
    img.w = read_pnm_token(in, path);
    img.h = read_pnm_token(in, path);
    int maxval = read_pnm_token(in, path);
    if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 is supported");
    in.get();  // the single whitespace byte after the header
    img.pixels.resize(img.h * img.w * img.c);
    in.read(reinterpret_cast<char*>(img.pixels.data()), img.pixels.size());
    if (!in) throw std::runtime_error(path + ": truncated raster");
    return img;
}

}  // namespace itarflow
