#pragma once

// Binary PGM (P5) / PPM (P6) emission and loading. Sample grids are tiled in
// row-major order with a 2-pixel black gutter around and between tiles; model
// values in [-1, 1] map affinely onto [0, 255].

#include <cstdint>
#include <string>
#include <vector>

namespace itarflow {

struct RasterImage {
    int64_t h = 0, w = 0, c = 0;  // c is 1 (PGM) or 3 (PPM)
    std::vector<uint8_t> pixels;  // row-major, channel-interleaved
};

// samples: count entries of h*w*c floats in [-1, 1] (clamped).
void emit_image_grid(const std::vector<std::vector<float>>& samples, int64_t h, int64_t w,
                     int64_t c, int64_t rows, int64_t cols, const std::string& path);

RasterImage read_raster(const std::string& path);
void write_raster(const RasterImage& img, const std::string& path);

uint8_t pixel_from_unit(float v);  // [-1, 1] -> [0, 255]

}  // namespace itarflow
