#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fednas/rng.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Labeled image set. Images are NCHW, already normalized.
struct Dataset {
    Tensor images;            // N x C x H x W
    std::vector<int> labels;  // length N
    int class_count = 0;

    int size() const { return static_cast<int>(labels.size()); }

    void validate() const {
        if (labels.empty() || images.dim(0) != size())
            throw std::invalid_argument("dataset: empty or image/label count mismatch");
        for (int y : labels)
            if (y < 0 || y >= class_count)
                throw std::invalid_argument("dataset: label out of range");
    }

    /// Copies rows `indices` into a batch tensor plus labels.
    std::pair<Tensor, std::vector<int>> gather(const std::vector<int>& indices, size_t from,
                                               size_t count) const {
        int C = images.dim(1), H = images.dim(2), W = images.dim(3);
        std::int64_t row = static_cast<std::int64_t>(C) * H * W;
        Tensor batch({static_cast<int>(count), C, H, W});
        std::vector<int> ys(count);
        for (size_t i = 0; i < count; ++i) {
            int idx = indices[from + i];
            std::memcpy(batch.data() + static_cast<std::int64_t>(i) * row,
                        images.data() + idx * row, sizeof(double) * static_cast<size_t>(row));
            ys[i] = labels[static_cast<size_t>(idx)];
        }
        return {std::move(batch), std::move(ys)};
    }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

constexpr int kCifarImageBytes = 3072;  // 3 planes of 32x32
constexpr int kCifarRecordBytes = kCifarImageBytes + 1;
constexpr int kCifarRecordsPerFile = 10000;
constexpr std::int64_t kCifarFileBytes =
    static_cast<std::int64_t>(kCifarRecordBytes) * kCifarRecordsPerFile;

/// Per-channel normalization constants (mean/std of the training split in
/// [0,1] scale); fixed so every run normalizes identically.
constexpr double kCifarMean[3] = {0.4914, 0.4822, 0.4465};
constexpr double kCifarStd[3] = {0.2470, 0.2435, 0.2616};

struct CifarPair {
    Dataset train;
    Dataset test;
};

namespace dataio {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.seekg(0, std::ios::end);
    std::int64_t size = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw IoError("short read on " + path);
    return bytes;
}

/// Parses one batch file worth of records into a pre-sized dataset at offset.
inline void parse_cifar_records(const std::vector<unsigned char>& bytes, const std::string& path,
                                Dataset& out, int offset) {
    if (static_cast<std::int64_t>(bytes.size()) != kCifarFileBytes)
        throw IoError(path + ": expected " + std::to_string(kCifarFileBytes) + " bytes, got " +
                      std::to_string(bytes.size()));
    std::int64_t row = 3 * 32 * 32;
    for (int r = 0; r < kCifarRecordsPerFile; ++r) {
        const unsigned char* rec = bytes.data() + static_cast<std::int64_t>(r) * kCifarRecordBytes;
        int label = rec[0];
        if (label > 9) throw IoError(path + ": bad label " + std::to_string(label));
        out.labels[static_cast<size_t>(offset + r)] = label;
        double* dst = out.images.data() + static_cast<std::int64_t>(offset + r) * row;
        for (int c = 0; c < 3; ++c) {
            const unsigned char* plane = rec + 1 + c * 1024;
            double mean = kCifarMean[c], inv = 1.0 / kCifarStd[c];
            for (int i = 0; i < 1024; ++i)
                dst[c * 1024 + i] = (plane[i] / 255.0 - mean) * inv;
        }
    }
}

/// Re-encodes one record from a parsed dataset back to raw bytes (test
/// support for the parse/serialize inverse property).
inline std::vector<unsigned char> serialize_cifar_record(const Dataset& d, int index) {
    std::vector<unsigned char> rec(kCifarRecordBytes);
    rec[0] = static_cast<unsigned char>(d.labels[static_cast<size_t>(index)]);
    std::int64_t row = 3 * 32 * 32;
    const double* src = d.images.data() + static_cast<std::int64_t>(index) * row;
    for (int c = 0; c < 3; ++c) {
        double mean = kCifarMean[c], sd = kCifarStd[c];
        for (int i = 0; i < 1024; ++i) {
            double v = (src[c * 1024 + i] * sd + mean) * 255.0;
            rec[1 + c * 1024 + i] = static_cast<unsigned char>(std::lround(v));
        }
    }
    return rec;
}

}  // namespace dataio

/// Loads the standard CIFAR-10 binary batches from a directory:
/// data_batch_1..5.bin (train, 50000) and test_batch.bin (10000).
inline CifarPair load_cifar10(const std::string& dir) {
    CifarPair out;
    out.train.images = Tensor({50000, 3, 32, 32});
    out.train.labels.resize(50000);
    out.train.class_count = 10;
    for (int b = 1; b <= 5; ++b) {
        std::string path = dir + "/data_batch_" + std::to_string(b) + ".bin";
        dataio::parse_cifar_records(dataio::read_file(path), path, out.train,
                                    (b - 1) * kCifarRecordsPerFile);
    }
    out.test.images = Tensor({10000, 3, 32, 32});
    out.test.labels.resize(10000);
    out.test.class_count = 10;
    std::string tpath = dir + "/test_batch.bin";
    dataio::parse_cifar_records(dataio::read_file(tpath), tpath, out.test, 0);
    out.train.validate();
    out.test.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset
// ---------------------------------------------------------------------------

/// Class-conditional Gaussian blobs. Each class gets a smooth random mean
/// pattern plus a high-amplitude marker pixel at a class-specific location;
/// samples add noise clamped to 3 sigma, with sigma growing in `difficulty`.
/// At difficulty 0 the marker margin exceeds the worst-case noise, so the
/// classes are linearly separable by construction. The whole set is
/// standardized to zero mean / unit variance at the end.
inline Dataset synthesize_dataset(int classes, int per_class, int channels, int height, int width,
                                  std::uint64_t seed, double difficulty) {
    if (classes < 2 || per_class < 2)
        throw std::invalid_argument("synthesize_dataset: need >= 2 classes and >= 2 per class");
    Rng rng(derive_seed(seed, 0xda7aull));
    int n = classes * per_class;
    std::int64_t row = static_cast<std::int64_t>(channels) * height * width;
    Dataset d;
    d.class_count = classes;
    d.images = Tensor({n, channels, height, width});
    d.labels.resize(static_cast<size_t>(n));

    // smooth per-class patterns: low-res grids upsampled bilinearly
    int gh = std::max(2, height / 4), gw = std::max(2, width / 4);
    std::vector<Tensor> patterns;
    for (int c = 0; c < classes; ++c) {
        Tensor grid({channels, gh, gw});
        for (std::int64_t i = 0; i < grid.numel(); ++i)
            grid[i] = std::clamp(rng.normal(), -2.0, 2.0);
        Tensor pat({channels, height, width});
        for (int ch = 0; ch < channels; ++ch)
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    double fy = static_cast<double>(y) * (gh - 1) / (height - 1);
                    double fx = static_cast<double>(x) * (gw - 1) / (width - 1);
                    int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
                    int y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
                    double ay = fy - y0, ax = fx - x0;
                    auto at = [&](int yy, int xx) {
                        return grid[(static_cast<std::int64_t>(ch) * gh + yy) * gw + xx];
                    };
                    pat[(static_cast<std::int64_t>(ch) * height + y) * width + x] =
                        (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
                        ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
                }
        patterns.push_back(std::move(pat));
    }

    double sigma = 0.5 + 1.5 * difficulty;
    double marker = 8.0;  // exceeds max |pattern| + 2 * 3 sigma at difficulty 0
    int idx = 0;
    for (int c = 0; c < classes; ++c) {
        int mc = c % channels;
        int my = (c * height) / classes;
        int mx = width / 2;
        for (int s = 0; s < per_class; ++s, ++idx) {
            d.labels[static_cast<size_t>(idx)] = c;
            double* dst = d.images.data() + static_cast<std::int64_t>(idx) * row;
            const double* pat = patterns[static_cast<size_t>(c)].data();
            for (std::int64_t i = 0; i < row; ++i)
                dst[i] = pat[i] + std::clamp(rng.normal(0.0, sigma), -3.0 * sigma, 3.0 * sigma);
            dst[(static_cast<std::int64_t>(mc) * height + my) * width + mx] += marker;
        }
    }

    // standardize globally (affine, preserves separability)
    double sum = 0.0, sumsq = 0.0;
    for (std::int64_t i = 0; i < d.images.numel(); ++i) {
        sum += d.images[i];
        sumsq += d.images[i] * d.images[i];
    }
    double mean = sum / d.images.numel();
    double var = sumsq / d.images.numel() - mean * mean;
    double inv = 1.0 / std::sqrt(std::max(var, 1e-12));
    for (std::int64_t i = 0; i < d.images.numel(); ++i)
        d.images[i] = (d.images[i] - mean) * inv;
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Pad-4 random crop plus horizontal flip, the deterministic core. Offsets
/// are in [0, 8]; flip mirrors the width axis. Shape and label never change.
inline void augment_with(Tensor& image, int dy, int dx, bool flip) {
    int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                int sy = y + dy - 4;
                int sx = x + dx - 4;
                double v = 0.0;
                if (sy >= 0 && sy < H && sx >= 0 && sx < W)
                    v = image[(static_cast<std::int64_t>(c) * H + sy) * W + sx];
                int tx = flip ? W - 1 - x : x;
                out[(static_cast<std::int64_t>(c) * H + y) * W + tx] = v;
            }
    image = std::move(out);
}

/// Samples crop offsets and the flip coin from the caller's stream.
inline void augment(Tensor& image, Rng& rng) {
    int dy = static_cast<int>(rng.below(9));
    int dx = static_cast<int>(rng.below(9));
    bool flip = rng.bernoulli(0.5);
    augment_with(image, dy, dx, flip);
}

/// Applies augment() to every row of a batch.
inline void augment_batch(Tensor& batch, Rng& rng) {
    int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    std::int64_t rowlen = static_cast<std::int64_t>(C) * H * W;
    for (int i = 0; i < N; ++i) {
        Tensor img({C, H, W});
        std::memcpy(img.data(), batch.data() + i * rowlen,
                    sizeof(double) * static_cast<size_t>(rowlen));
        augment(img, rng);
        std::memcpy(batch.data() + i * rowlen, img.data(),
                    sizeof(double) * static_cast<size_t>(rowlen));
    }
}

}  // namespace fednas
