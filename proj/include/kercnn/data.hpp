#pragma once

#include "kercnn/tensor.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <utility>

namespace kercnn {

// ---------------------------------------------------------------------------
// Datasets and the IDX binary format.
//
//   images: magic 0x00000803 | count | rows | cols | pixels uint8 (big endian
//           header), one byte per pixel, row-major
//   labels: magic 0x00000801 | count | labels uint8
//
// Loading scales pixels to [0, 1]; z-scoring (fit on the training split
// only) then centres them. Headers are validated against the actual file
// length, so truncated or padded files are rejected.
// ---------------------------------------------------------------------------

template <typename T>
struct Dataset {
    Tensor<T> images;  // (N, H, W, C)
    std::vector<int> labels;
    int class_count = 10;
    // z-score statistics of the split this was normalised with; empty = raw
    std::vector<double> mean, stddev;

    int n() const { return images.empty() ? 0 : images.dim(0); }
    int height() const { return images.dim(1); }
    int width() const { return images.dim(2); }
    int channels() const { return images.dim(3); }

    Tensor<T> image(int i) const {
        const int h = height(), w = width(), c = channels();
        Tensor<T> out{Shape{h, w, c}};
        const std::size_t plane = static_cast<std::size_t>(h) * w * c;
        const T* src = images.data() + plane * static_cast<std::size_t>(i);
        std::copy(src, src + plane, out.data());
        return out;
    }

    void set_image(int i, const Tensor<T>& img) {
        const std::size_t plane = static_cast<std::size_t>(height()) * width() * channels();
        std::copy(img.data(), img.data() + plane,
                  images.data() + plane * static_cast<std::size_t>(i));
    }
};

namespace detail {

inline std::uint32_t read_be_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return (static_cast<std::uint32_t>(b[0]) << 24) |
           (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline void write_be_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uintmax_t file_length(const std::string& path) {
    std::error_code ec;
    const auto len = std::filesystem::file_size(path, ec);
    if (ec) throw std::runtime_error("cannot stat " + path);
    return len;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path,
                    int class_count = 10) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("load_idx: cannot open " + images_path);
    if (detail::read_be_u32(imgs) != kIdxImagesMagic)
        throw std::runtime_error("load_idx: bad image magic in " + images_path);
    const std::uint32_t n = detail::read_be_u32(imgs);
    const std::uint32_t rows = detail::read_be_u32(imgs);
    const std::uint32_t cols = detail::read_be_u32(imgs);
    if (!imgs || n == 0 || rows == 0 || cols == 0)
        throw std::runtime_error("load_idx: bad image header in " + images_path);
    const std::uintmax_t expect =
        16 + static_cast<std::uintmax_t>(n) * rows * cols;
    if (detail::file_length(images_path) != expect)
        throw std::runtime_error("load_idx: declared count disagrees with file length of " +
                                 images_path);

    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw std::runtime_error("load_idx: cannot open " + labels_path);
    if (detail::read_be_u32(lbls) != kIdxLabelsMagic)
        throw std::runtime_error("load_idx: bad label magic in " + labels_path);
    const std::uint32_t nl = detail::read_be_u32(lbls);
    if (nl != n)
        throw std::runtime_error("load_idx: image/label counts disagree for " + images_path);
    if (detail::file_length(labels_path) != 8 + static_cast<std::uintmax_t>(n))
        throw std::runtime_error("load_idx: declared count disagrees with file length of " +
                                 labels_path);

    Dataset<T> ds;
    ds.class_count = class_count;
    ds.images = Tensor<T>{Shape{static_cast<int>(n), static_cast<int>(rows),
                                static_cast<int>(cols), 1}};
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
        T* dst = ds.images.data() + static_cast<std::size_t>(i) * buf.size();
        for (std::size_t p = 0; p < buf.size(); ++p)
            dst[p] = static_cast<T>(buf[p]) / T(255);
    }
    if (!imgs) throw std::runtime_error("load_idx: truncated image payload");

    ds.labels.resize(n);
    std::vector<unsigned char> lab(n);
    lbls.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(n));
    if (!lbls) throw std::runtime_error("load_idx: truncated label payload");
    for (std::uint32_t i = 0; i < n; ++i) {
        if (lab[i] >= class_count)
            throw std::runtime_error("load_idx: label out of range in " + labels_path);
        ds.labels[i] = lab[i];
    }
    return ds;
}

// Writes [0, 1]-valued images back as uint8 IDX; values are clamped then
// rounded, so load -> write round-trips the original bytes exactly.
template <typename T>
void write_idx(const std::string& images_path, const std::string& labels_path,
               const Dataset<T>& ds) {
    if (ds.n() == 0) throw std::invalid_argument("write_idx: empty dataset");
    if (ds.channels() != 1)
        throw std::invalid_argument("write_idx: single-channel images only");
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("write_idx: cannot open " + images_path);
    detail::write_be_u32(imgs, kIdxImagesMagic);
    detail::write_be_u32(imgs, static_cast<std::uint32_t>(ds.n()));
    detail::write_be_u32(imgs, static_cast<std::uint32_t>(ds.height()));
    detail::write_be_u32(imgs, static_cast<std::uint32_t>(ds.width()));
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const double v = std::clamp(static_cast<double>(ds.images.flat(i)), 0.0, 1.0);
        const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
        imgs.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!imgs) throw std::runtime_error("write_idx: write failed for " + images_path);

    std::ofstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw std::runtime_error("write_idx: cannot open " + labels_path);
    detail::write_be_u32(lbls, kIdxLabelsMagic);
    detail::write_be_u32(lbls, static_cast<std::uint32_t>(ds.n()));
    for (int label : ds.labels) {
        const unsigned char b = static_cast<unsigned char>(label);
        lbls.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!lbls) throw std::runtime_error("write_idx: write failed for " + labels_path);
}

// ---------------------------------------------------------------------------
// Subsets, splits, z-scoring, batches
// ---------------------------------------------------------------------------

template <typename T>
Dataset<T> take(const Dataset<T>& ds, const std::vector<int>& idx) {
    Dataset<T> out;
    out.class_count = ds.class_count;
    out.mean = ds.mean;
    out.stddev = ds.stddev;
    out.images =
        Tensor<T>{Shape{static_cast<int>(idx.size()), ds.height(), ds.width(), ds.channels()}};
    out.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= ds.n())
            throw std::invalid_argument("take: index out of range");
        out.set_image(static_cast<int>(i), ds.image(idx[i]));
        out.labels.push_back(ds.labels[static_cast<std::size_t>(idx[i])]);
    }
    return out;
}

// Seeded shuffle, then first n as a subset (n = 0 or n >= N keeps everything).
template <typename T>
Dataset<T> shuffled_subset(const Dataset<T>& ds, int n, std::uint64_t seed) {
    if (n <= 0 || n >= ds.n()) n = ds.n();
    std::vector<int> idx(static_cast<std::size_t>(ds.n()));
    for (int i = 0; i < ds.n(); ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(n));
    return take(ds, idx);
}

// Seeded shuffle; the last val_count samples become the validation split.
// val_count = 0 returns the input untouched with an empty validation set.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> split_train_val(const Dataset<T>& ds, int val_count,
                                                  std::uint64_t seed) {
    if (val_count < 0 || val_count >= ds.n())
        throw std::invalid_argument("split_train_val: bad validation count");
    if (val_count == 0) return {ds, Dataset<T>{}};
    std::vector<int> idx(static_cast<std::size_t>(ds.n()));
    for (int i = 0; i < ds.n(); ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    std::vector<int> tr(idx.begin(), idx.end() - val_count);
    std::vector<int> va(idx.end() - val_count, idx.end());
    return {take(ds, tr), take(ds, va)};
}

struct ZScoreStats {
    std::vector<double> mean, stddev;
};

template <typename T>
ZScoreStats zscore_fit(const Dataset<T>& train) {
    const int c = train.channels();
    std::vector<double> sum(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(c), 0.0);
    const std::size_t per_channel = train.images.size() / static_cast<std::size_t>(c);
    for (std::size_t i = 0; i < train.images.size(); ++i) {
        const double v = static_cast<double>(train.images.flat(i));
        const std::size_t ch = i % static_cast<std::size_t>(c);
        sum[ch] += v;
        sumsq[ch] += v * v;
    }
    ZScoreStats st;
    for (int ch = 0; ch < c; ++ch) {
        const double m = sum[static_cast<std::size_t>(ch)] / static_cast<double>(per_channel);
        const double var =
            sumsq[static_cast<std::size_t>(ch)] / static_cast<double>(per_channel) - m * m;
        const double sd = std::sqrt(std::max(var, 0.0));
        if (sd < 1e-12)
            throw std::runtime_error("zscore_fit: constant channel, cannot normalise");
        st.mean.push_back(m);
        st.stddev.push_back(sd);
    }
    return st;
}

template <typename T>
void zscore_apply(Dataset<T>& ds, const ZScoreStats& st) {
    const int c = ds.channels();
    if (static_cast<int>(st.mean.size()) != c)
        throw std::invalid_argument("zscore_apply: channel mismatch");
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const std::size_t ch = i % static_cast<std::size_t>(c);
        ds.images.flat(i) = static_cast<T>(
            (static_cast<double>(ds.images.flat(i)) - st.mean[ch]) / st.stddev[ch]);
    }
    ds.mean = st.mean;
    ds.stddev = st.stddev;
}

template <typename T>
Tensor<T> denormalize_image(const Tensor<T>& img, const ZScoreStats& st) {
    Tensor<T> out = img;
    const int c = img.dim(2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t ch = i % static_cast<std::size_t>(c);
        out.flat(i) =
            static_cast<T>(static_cast<double>(out.flat(i)) * st.stddev[ch] + st.mean[ch]);
    }
    return out;
}

// Per-epoch reshuffled batch index lists; the final short batch is kept.
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed,
                                                   int epoch) {
    if (n < 1 || batch_size < 1)
        throw std::invalid_argument("epoch_batches: need n >= 1 and batch_size >= 1");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(idx);
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(start + batch_size, n);
        out.emplace_back(idx.begin() + start, idx.begin() + end);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Registry: well-known IDX datasets under a data root
// ---------------------------------------------------------------------------

struct DatasetPaths {
    std::string train_images, train_labels, test_images, test_labels;
};

inline std::string data_root_from_env() {
    const char* env = std::getenv("KERCNN_DATA_ROOT");
    return env ? std::string(env) : std::string();
}

inline DatasetPaths dataset_paths(const std::string& name, const std::string& root) {
    if (name != "mnist" && name != "kmnist" && name != "fashion")
        throw std::invalid_argument("unknown dataset: " + name +
                                    " (expected mnist, kmnist, fashion or synth)");
    const std::string base = root + "/" + name + "/";
    return {base + "train-images-idx3-ubyte", base + "train-labels-idx1-ubyte",
            base + "t10k-images-idx3-ubyte", base + "t10k-labels-idx1-ubyte"};
}

inline bool dataset_available(const std::string& name, const std::string& root) {
    if (root.empty()) return false;
    const auto p = dataset_paths(name, root);
    return std::filesystem::exists(p.train_images) &&
           std::filesystem::exists(p.train_labels) &&
           std::filesystem::exists(p.test_images) && std::filesystem::exists(p.test_labels);
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_dataset_pair(const std::string& name,
                                                    const std::string& root) {
    const auto p = dataset_paths(name, root);
    return {load_idx<T>(p.train_images, p.train_labels),
            load_idx<T>(p.test_images, p.test_labels)};
}

}  // namespace kercnn
