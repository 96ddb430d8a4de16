#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dverge/models.hpp"
#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

/// Labeled images [count, channels, height, width] with values in [0, 1].
struct Dataset {
    Tensor images;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;
    std::string split;  // "train" or "test"
    std::map<std::string, std::string> provenance;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const;
    /// Throws std::invalid_argument when an invariant does not hold.
    void validate() const;
    Dataset subset(const std::vector<std::size_t>& indices) const;
    Dataset head(std::size_t n) const;
};

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t per_class = 200;
    std::size_t size = 16;  // height = width
    std::size_t channels = 1;
    double noise = 0.1;  // uniform pixel noise in [-noise, noise]
    std::size_t jitter = 0;  // random glyph shift of up to this many pixels
    double amplitude = 1.0;   // glyph intensity above the background
    double background = 0.0;
    std::uint64_t seed = 0;
};

/// Class k is glyph k % 5 (horizontal bar, vertical bar, disc, cross,
/// diagonal) at a position chosen by k / 5. Pixel values are quantized to
/// multiples of 1/255 so the set survives an IDX round trip unchanged. Train
/// and test draw from disjoint seed streams.
Dataset gen_synthetic(const SyntheticSpec& spec, const std::string& split);

/// Noise-free glyph for class k.
Tensor render_glyph(std::size_t k, std::size_t size, int shift_x = 0, int shift_y = 0);

/// IDX reader: magic 0x00000803 ([N,H,W]) or 0x00000804 ([N,C,H,W]) unsigned
/// byte images, 0x00000801 labels. Pixels are divided by 255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 0);
/// Writes pixels as round(255 v).
void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

/// Shuffled index batches that cover every sample once.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t count, std::size_t batch, std::uint64_t seed);

inline constexpr int kCheckpointVersion = 1;

/// Layout: dir/ensemble.json plus dir/sub_<i>/{manifest.json, weights.bin}.
/// Weights are little-endian 32-bit floats in manifest table order.
void save_checkpoint(const Ensemble& ensemble, const std::filesystem::path& dir);
Ensemble load_checkpoint(const std::filesystem::path& dir);

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::string hex64(std::uint64_t v);

DVERGE_NAMESPACE_END
