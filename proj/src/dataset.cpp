#include "itarflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "itarflow/image_io.hpp"
#include "itarflow/trainer.hpp"

namespace itarflow {

namespace {

// Sequences of i.i.d. mixture draws; the class id is the mixture component,
// shared across a sequence (one label per example).
class GmmDataset : public Dataset {
public:
    GmmDataset(oracle::GaussianMixture gmm, int64_t seq_len) : gmm_(std::move(gmm)), n_(seq_len) {
        gmm_.validate();
    }

    int64_t seq_len() const override { return n_; }
    int64_t token_dim() const override { return gmm_.dim; }
    int64_t num_classes() const override { return static_cast<int64_t>(gmm_.components()); }
    const oracle::GaussianMixture* analytic_gmm() const override { return &gmm_; }

    Batch batch(int64_t size, std::mt19937_64& rng) override {
        int64_t d = gmm_.dim;
        std::vector<float> x(size * n_ * d);
        std::vector<int64_t> labels(size);
        for (int64_t b = 0; b < size; ++b) {
            int k = gmm_.sample_component(rng);
            labels[b] = k;
            for (int64_t i = 0; i < n_; ++i) {
                auto v = gmm_.sample_from_component(k, rng);
                for (int64_t j = 0; j < d; ++j) x[(b * n_ + i) * d + j] = static_cast<float>(v[j]);
            }
        }
        return {Tensor::from_data({size, n_, d}, std::move(x)), std::move(labels)};
    }

private:
    oracle::GaussianMixture gmm_;
    int64_t n_;
};

// 2-d checkerboard over [-2, 2]^2, unit cells, single class.
class CheckerboardDataset : public Dataset {
public:
    explicit CheckerboardDataset(int64_t seq_len) : n_(seq_len) {}
    int64_t seq_len() const override { return n_; }
    int64_t token_dim() const override { return 2; }
    int64_t num_classes() const override { return 1; }

    Batch batch(int64_t size, std::mt19937_64& rng) override {
        std::uniform_real_distribution<double> u(-2.0, 2.0);
        std::vector<float> x(size * n_ * 2);
        for (int64_t b = 0; b < size; ++b)
            for (int64_t i = 0; i < n_; ++i) {
                double px, py;
                do {
                    px = u(rng);
                    py = u(rng);
                } while (((int64_t)std::floor(px) + (int64_t)std::floor(py)) % 2 != 0);
                x[(b * n_ + i) * 2] = static_cast<float>(px);
                x[(b * n_ + i) * 2 + 1] = static_cast<float>(py);
            }
        return {Tensor::from_data({size, n_, 2}, std::move(x)),
                std::vector<int64_t>(size, 0)};
    }

private:
    int64_t n_;
};

class ImageDataset : public Dataset {
public:
    ImageDataset(std::vector<std::vector<float>> images, std::vector<int64_t> labels, int64_t h,
                 int64_t w, int64_t c, int64_t p, int64_t num_classes)
        : images_(std::move(images)), labels_(std::move(labels)), h_(h), w_(w), c_(c), p_(p),
          num_classes_(num_classes) {
        if (h_ % p_ != 0 || w_ % p_ != 0)
            throw std::invalid_argument("dataset: patch size " + std::to_string(p_) +
                                        " does not divide " + std::to_string(h_) + "x" +
                                        std::to_string(w_));
        order_.resize(images_.size());
        std::iota(order_.begin(), order_.end(), 0);
    }

    int64_t seq_len() const override { return (h_ / p_) * (w_ / p_); }
    int64_t token_dim() const override { return p_ * p_ * c_; }
    int64_t num_classes() const override { return num_classes_; }
    int64_t image_h() const override { return h_; }
    int64_t image_w() const override { return w_; }
    int64_t image_c() const override { return c_; }
    int64_t patch_size() const override { return p_; }

    Batch batch(int64_t size, std::mt19937_64& rng) override {
        int64_t n = seq_len(), d = token_dim();
        std::vector<float> x(size * n * d);
        std::vector<int64_t> labels(size);
        for (int64_t b = 0; b < size; ++b) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng);
                cursor_ = 0;
            }
            size_t idx = order_[cursor_++];
            auto tokens = patchify(images_[idx], h_, w_, c_, p_);
            std::copy(tokens.begin(), tokens.end(), x.begin() + b * n * d);
            labels[b] = labels_[idx];
        }
        return {Tensor::from_data({size, n, d}, std::move(x)), std::move(labels)};
    }

private:
    std::vector<std::vector<float>> images_;
    std::vector<int64_t> labels_;
    int64_t h_, w_, c_, p_, num_classes_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

uint32_t read_be32(std::istream& in, const std::string& path) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(path + ": truncated IDX header");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

void write_be32(std::ostream& out, uint32_t v) {
    uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

IdxImages read_idx_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open IDX file");
    if (read_be32(in, path) != 0x00000803u)
        throw std::runtime_error(path + ": not an IDX image file (bad magic)");
    IdxImages out;
    out.count = read_be32(in, path);
    out.h = read_be32(in, path);
    out.w = read_be32(in, path);
    out.pixels.resize(out.count * out.h * out.w);
    in.read(reinterpret_cast<char*>(out.pixels.data()), out.pixels.size());
    if (!in) throw std::runtime_error(path + ": truncated IDX payload");
    return out;
}

std::vector<uint8_t> read_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open IDX file");
    if (read_be32(in, path) != 0x00000801u)
        throw std::runtime_error(path + ": not an IDX label file (bad magic)");
    uint32_t count = read_be32(in, path);
    std::vector<uint8_t> labels(count);
    in.read(reinterpret_cast<char*>(labels.data()), labels.size());
    if (!in) throw std::runtime_error(path + ": truncated IDX payload");
    return labels;
}

void write_idx_images(const IdxImages& imgs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write IDX file");
    write_be32(out, 0x00000803u);
    write_be32(out, static_cast<uint32_t>(imgs.count));
    write_be32(out, static_cast<uint32_t>(imgs.h));
    write_be32(out, static_cast<uint32_t>(imgs.w));
    out.write(reinterpret_cast<const char*>(imgs.pixels.data()), imgs.pixels.size());
}

void write_idx_labels(const std::vector<uint8_t>& labels, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write IDX file");
    write_be32(out, 0x00000801u);
    write_be32(out, static_cast<uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), labels.size());
}

std::unique_ptr<Dataset> make_dataset(const RunConfig& cfg) {
    if (cfg.task == "gmm1d") {
        oracle::GaussianMixture g;
        g.weights = {0.5, 0.5};
        g.means = {{-1.0}, {1.0}};
        g.sigmas = {0.3, 0.3};
        g.dim = 1;
        return std::make_unique<GmmDataset>(std::move(g), cfg.seq_len);
    }
    if (cfg.task == "gmm2d") {
        oracle::GaussianMixture g;
        g.weights = {0.25, 0.25, 0.25, 0.25};
        g.means = {{-1.0, -1.0}, {-1.0, 1.0}, {1.0, -1.0}, {1.0, 1.0}};
        g.sigmas = {0.25, 0.25, 0.25, 0.25};
        g.dim = 2;
        return std::make_unique<GmmDataset>(std::move(g), cfg.seq_len);
    }
    if (cfg.task == "checkerboard2d") {
        return std::make_unique<CheckerboardDataset>(cfg.seq_len);
    }
    if (cfg.task == "idx-file") {
        IdxImages raw = read_idx_images(cfg.data_path);
        std::vector<int64_t> labels(raw.count, 0);
        int64_t num_classes = 1;
        if (!cfg.labels_path.empty()) {
            auto lab = read_idx_labels(cfg.labels_path);
            if (static_cast<int64_t>(lab.size()) != raw.count)
                throw std::runtime_error(cfg.labels_path + ": label count does not match images");
            for (int64_t i = 0; i < raw.count; ++i) {
                labels[i] = lab[i];
                num_classes = std::max<int64_t>(num_classes, lab[i] + 1);
            }
        }
        std::vector<std::vector<float>> images(raw.count);
        for (int64_t i = 0; i < raw.count; ++i) {
            images[i].resize(raw.h * raw.w);
            for (int64_t j = 0; j < raw.h * raw.w; ++j)
                images[i][j] = static_cast<float>(raw.pixels[i * raw.h * raw.w + j]) / 127.5f - 1.0f;
        }
        return std::make_unique<ImageDataset>(std::move(images), std::move(labels), raw.h, raw.w,
                                              1, cfg.patch_size, num_classes);
    }
    if (cfg.task == "image-dir") {
        namespace fs = std::filesystem;
        std::vector<std::string> paths;
        for (const auto& e : fs::directory_iterator(cfg.data_path)) {
            std::string ext = e.path().extension().string();
            if (ext == ".pgm" || ext == ".ppm") paths.push_back(e.path().string());
        }
        std::sort(paths.begin(), paths.end());
        if (paths.empty())
            throw std::runtime_error(cfg.data_path + ": no .pgm/.ppm images found");
        std::vector<std::vector<float>> images;
        int64_t h = 0, w = 0, c = 0;
        for (const auto& p : paths) {
            RasterImage img = read_raster(p);
            if (images.empty()) {
                h = img.h;
                w = img.w;
                c = img.c;
            } else if (img.h != h || img.w != w || img.c != c) {
                throw std::runtime_error(p + ": image geometry differs from the first image");
            }
            std::vector<float> f(img.pixels.size());
            for (size_t j = 0; j < f.size(); ++j) f[j] = img.pixels[j] / 127.5f - 1.0f;
            images.push_back(std::move(f));
        }
        std::vector<int64_t> zero_labels(images.size(), 0);
        return std::make_unique<ImageDataset>(std::move(images), std::move(zero_labels), h, w, c,
                                              cfg.patch_size, 1);
    }
    throw std::invalid_argument("unknown task '" + cfg.task + "'");
}

}  // namespace itarflow
