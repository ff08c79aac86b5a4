#pragma once

// Training data sources: procedural analytic tasks (mixtures, checkerboard)
// and tiny real-image sets in IDX or PGM/PPM form. Procedural tasks expose
// their exact mixture so evaluations can compare against closed forms.
// Image pixels are mapped to [-1, 1].

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "itarflow/config.hpp"
#include "itarflow/oracle.hpp"
#include "itarflow/tensor.hpp"

namespace itarflow {

struct Batch {
    Tensor x;  // (B, N, d) clean tokens
    std::vector<int64_t> labels;
};

class Dataset {
public:
    virtual ~Dataset() = default;
    virtual int64_t seq_len() const = 0;
    virtual int64_t token_dim() const = 0;
    virtual int64_t num_classes() const = 0;
    virtual Batch batch(int64_t size, std::mt19937_64& rng) = 0;

    // closed-form mixture behind the task, when one exists
    virtual const oracle::GaussianMixture* analytic_gmm() const { return nullptr; }

    // image geometry (zero for point tasks)
    virtual int64_t image_h() const { return 0; }
    virtual int64_t image_w() const { return 0; }
    virtual int64_t image_c() const { return 0; }
    virtual int64_t patch_size() const { return 0; }
};

std::unique_ptr<Dataset> make_dataset(const RunConfig& cfg);

// IDX (big-endian) image/label files, uint8 payloads.
struct IdxImages {
    int64_t count, h, w;
    std::vector<uint8_t> pixels;  // count * h * w
};
IdxImages read_idx_images(const std::string& path);
std::vector<uint8_t> read_idx_labels(const std::string& path);
void write_idx_images(const IdxImages& imgs, const std::string& path);
void write_idx_labels(const std::vector<uint8_t>& labels, const std::string& path);

}  // namespace itarflow
