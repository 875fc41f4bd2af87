#include <catch2/catch_amalgamated.hpp>

#include "kercnn/data.hpp"
#include "kercnn/synth.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace kercnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    const fs::path dir = fs::temp_directory_path() / "kercnn_data_tests";
    fs::create_directories(dir);
    return dir;
}

std::vector<unsigned char> file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void patch_byte(const fs::path& p, std::streamoff off, unsigned char value) {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    REQUIRE(f.good());
    f.seekp(off);
    f.write(reinterpret_cast<const char*>(&value), 1);
}

}  // namespace

TEST_CASE("idx write then load preserves pixels and labels") {
    const auto dir = scratch_dir();
    const auto ip = (dir / "a-images").string();
    const auto lp = (dir / "a-labels").string();

    Dataset<float> ds = make_synth_dataset<float>(23, 99);
    write_idx(ip, lp, ds);

    Dataset<float> back = load_idx<float>(ip, lp);
    REQUIRE(back.n() == 23);
    REQUIRE(back.height() == 28);
    REQUIRE(back.width() == 28);
    REQUIRE(back.channels() == 1);
    REQUIRE(back.labels == ds.labels);
    // uint8 quantisation: within half a grey level
    REQUIRE(back.images.max_abs_diff(ds.images) <= 0.5 / 255.0 + 1e-6);
}

TEST_CASE("idx load then write is byte identical") {
    const auto dir = scratch_dir();
    const auto ip1 = (dir / "b1-images").string();
    const auto lp1 = (dir / "b1-labels").string();
    const auto ip2 = (dir / "b2-images").string();
    const auto lp2 = (dir / "b2-labels").string();

    write_idx(ip1, lp1, make_synth_dataset<float>(17, 5));

    SECTION("float pipeline") {
        Dataset<float> ds = load_idx<float>(ip1, lp1);
        write_idx(ip2, lp2, ds);
        REQUIRE(file_bytes(ip1) == file_bytes(ip2));
        REQUIRE(file_bytes(lp1) == file_bytes(lp2));
    }
    SECTION("double pipeline") {
        Dataset<double> ds = load_idx<double>(ip1, lp1);
        write_idx(ip2, lp2, ds);
        REQUIRE(file_bytes(ip1) == file_bytes(ip2));
        REQUIRE(file_bytes(lp1) == file_bytes(lp2));
    }
}

TEST_CASE("idx loader rejects malformed files") {
    const auto dir = scratch_dir();
    const auto ip = (dir / "c-images").string();
    const auto lp = (dir / "c-labels").string();
    write_idx(ip, lp, make_synth_dataset<float>(6, 1));

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_idx<float>((dir / "nope").string(), lp), std::runtime_error);
    }
    SECTION("bad image magic") {
        patch_byte(ip, 2, 0x09);
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("bad image magic"));
    }
    SECTION("bad label magic") {
        patch_byte(lp, 3, 0x02);
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("bad label magic"));
    }
    SECTION("count and file length disagree") {
        patch_byte(ip, 7, 7);  // claim 7 images, payload holds 6
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("file length"));
    }
    SECTION("image and label counts disagree") {
        patch_byte(lp, 7, 5);
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("counts disagree"));
    }
    SECTION("trailing garbage") {
        std::ofstream app(ip, std::ios::binary | std::ios::app);
        app.put('x');
        app.close();
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("file length"));
    }
    SECTION("label out of range") {
        patch_byte(lp, 8, 200);
        REQUIRE_THROWS_WITH(load_idx<float>(ip, lp),
                            Catch::Matchers::ContainsSubstring("label out of range"));
    }
}

TEST_CASE("take and shuffled_subset") {
    Dataset<float> ds = make_synth_dataset<float>(30, 3);

    SECTION("take picks exactly the requested rows") {
        Dataset<float> sub = take(ds, {4, 0, 29});
        REQUIRE(sub.n() == 3);
        REQUIRE(sub.labels == std::vector<int>{4, 0, 9});
        REQUIRE(sub.image(0) == ds.image(4));
        REQUIRE(sub.image(1) == ds.image(0));
        REQUIRE(sub.image(2) == ds.image(29));
        REQUIRE_THROWS_AS(take(ds, {30}), std::invalid_argument);
        REQUIRE_THROWS_AS(take(ds, {-1}), std::invalid_argument);
    }
    SECTION("shuffled_subset is deterministic and bounded") {
        Dataset<float> a = shuffled_subset(ds, 10, 77);
        Dataset<float> b = shuffled_subset(ds, 10, 77);
        Dataset<float> c = shuffled_subset(ds, 10, 78);
        REQUIRE(a.n() == 10);
        REQUIRE(a.images == b.images);
        REQUIRE(a.labels == b.labels);
        REQUIRE(a.labels != c.labels);
        REQUIRE(shuffled_subset(ds, 0, 1).n() == 30);
        REQUIRE(shuffled_subset(ds, 500, 1).n() == 30);
    }
}

TEST_CASE("train/validation split") {
    Dataset<float> ds = make_synth_dataset<float>(40, 11);

    SECTION("sizes and disjoint coverage") {
        auto [tr, va] = split_train_val(ds, 12, 5);
        REQUIRE(tr.n() == 28);
        REQUIRE(va.n() == 12);
        // every original image appears exactly once across the two splits
        std::vector<int> seen(40, 0);
        auto find_origin = [&](const Tensor<float>& img) {
            for (int i = 0; i < ds.n(); ++i)
                if (ds.image(i) == img) return i;
            return -1;
        };
        for (int i = 0; i < tr.n(); ++i) seen[static_cast<std::size_t>(find_origin(tr.image(i)))]++;
        for (int i = 0; i < va.n(); ++i) seen[static_cast<std::size_t>(find_origin(va.image(i)))]++;
        for (int s : seen) REQUIRE(s == 1);
    }
    SECTION("deterministic per seed") {
        auto [tr1, va1] = split_train_val(ds, 8, 123);
        auto [tr2, va2] = split_train_val(ds, 8, 123);
        auto [tr3, va3] = split_train_val(ds, 8, 124);
        REQUIRE(tr1.images == tr2.images);
        REQUIRE(va1.labels == va2.labels);
        REQUIRE(va1.labels != va3.labels);
    }
    SECTION("zero validation keeps order") {
        auto [tr, va] = split_train_val(ds, 0, 9);
        REQUIRE(tr.n() == 40);
        REQUIRE(va.n() == 0);
        REQUIRE(tr.images == ds.images);
    }
    SECTION("rejects bad counts") {
        REQUIRE_THROWS_AS(split_train_val(ds, -1, 0), std::invalid_argument);
        REQUIRE_THROWS_AS(split_train_val(ds, 40, 0), std::invalid_argument);
    }
}

TEST_CASE("z-score normalisation") {
    Dataset<double> train = make_synth_dataset<double>(50, 21);
    Dataset<double> test = make_synth_dataset<double>(20, 22);

    SECTION("fit on train gives zero mean unit variance") {
        const ZScoreStats st = zscore_fit(train);
        REQUIRE(st.mean.size() == 1);
        REQUIRE(st.mean[0] > 0.0);
        REQUIRE(st.stddev[0] > 0.0);
        zscore_apply(train, st);
        double s = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < train.images.size(); ++i) {
            s += train.images.flat(i);
            sq += train.images.flat(i) * train.images.flat(i);
        }
        const double n = static_cast<double>(train.images.size());
        REQUIRE(std::abs(s / n) < 1e-9);
        REQUIRE(std::abs(sq / n - 1.0) < 1e-9);
        REQUIRE(train.mean == st.mean);
    }
    SECTION("test reuses train statistics") {
        const ZScoreStats st = zscore_fit(train);
        Dataset<double> raw = test;
        zscore_apply(test, st);
        for (int i = 0; i < 5; ++i) {
            const double want = (raw.images.flat(static_cast<std::size_t>(i) * 784) - st.mean[0]) /
                                st.stddev[0];
            REQUIRE(test.images.flat(static_cast<std::size_t>(i) * 784) ==
                    Catch::Approx(want).margin(1e-12));
        }
    }
    SECTION("denormalize inverts apply") {
        const ZScoreStats st = zscore_fit(train);
        const Tensor<double> original = test.image(3);
        zscore_apply(test, st);
        const Tensor<double> back = denormalize_image(test.image(3), st);
        REQUIRE(back.max_abs_diff(original) < 1e-12);
    }
    SECTION("constant channel is rejected") {
        Dataset<double> flat;
        flat.images = Tensor<double>::full({4, 3, 3, 1}, 0.25);
        flat.labels = {0, 1, 2, 3};
        REQUIRE_THROWS_AS(zscore_fit(flat), std::runtime_error);
    }
}

TEST_CASE("epoch batches") {
    SECTION("covers every index once, keeps short tail") {
        const auto batches = epoch_batches(23, 5, 42, 0);
        REQUIRE(batches.size() == 5);
        for (std::size_t b = 0; b + 1 < batches.size(); ++b) REQUIRE(batches[b].size() == 5);
        REQUIRE(batches.back().size() == 3);
        std::vector<int> seen(23, 0);
        for (const auto& b : batches)
            for (int i : b) seen[static_cast<std::size_t>(i)]++;
        for (int s : seen) REQUIRE(s == 1);
    }
    SECTION("same epoch reproduces, next epoch reshuffles") {
        REQUIRE(epoch_batches(40, 8, 7, 2) == epoch_batches(40, 8, 7, 2));
        REQUIRE(epoch_batches(40, 8, 7, 2) != epoch_batches(40, 8, 7, 3));
        REQUIRE(epoch_batches(40, 8, 7, 2) != epoch_batches(40, 8, 8, 2));
    }
    SECTION("validation") {
        REQUIRE_THROWS_AS(epoch_batches(0, 5, 1, 0), std::invalid_argument);
        REQUIRE_THROWS_AS(epoch_batches(5, 0, 1, 0), std::invalid_argument);
    }
}

TEST_CASE("dataset registry") {
    SECTION("standard idx filenames") {
        const DatasetPaths p = dataset_paths("kmnist", "/data");
        REQUIRE(p.train_images == "/data/kmnist/train-images-idx3-ubyte");
        REQUIRE(p.train_labels == "/data/kmnist/train-labels-idx1-ubyte");
        REQUIRE(p.test_images == "/data/kmnist/t10k-images-idx3-ubyte");
        REQUIRE(p.test_labels == "/data/kmnist/t10k-labels-idx1-ubyte");
        REQUIRE_THROWS_AS(dataset_paths("cifar99", "/data"), std::invalid_argument);
    }
    SECTION("env root") {
        setenv("KERCNN_DATA_ROOT", "/somewhere/data", 1);
        REQUIRE(data_root_from_env() == "/somewhere/data");
        unsetenv("KERCNN_DATA_ROOT");
        REQUIRE(data_root_from_env().empty());
    }
    SECTION("availability and loading against files on disk") {
        const fs::path root = scratch_dir() / "registry_root";
        fs::remove_all(root);
        fs::create_directories(root / "mnist");
        REQUIRE_FALSE(dataset_available("mnist", root.string()));
        REQUIRE_FALSE(dataset_available("mnist", ""));

        const DatasetPaths p = dataset_paths("mnist", root.string());
        write_idx(p.train_images, p.train_labels, make_synth_dataset<float>(12, 1));
        REQUIRE_FALSE(dataset_available("mnist", root.string()));
        write_idx(p.test_images, p.test_labels, make_synth_dataset<float>(4, 2));
        REQUIRE(dataset_available("mnist", root.string()));

        auto [train, test] = load_dataset_pair<float>("mnist", root.string());
        REQUIRE(train.n() == 12);
        REQUIRE(test.n() == 4);
        REQUIRE(train.labels[3] == 3);
    }
}

TEST_CASE("synthetic digit dataset") {
    SECTION("deterministic per seed and per index") {
        Dataset<float> a = make_synth_dataset<float>(20, 31);
        Dataset<float> b = make_synth_dataset<float>(20, 31);
        Dataset<float> c = make_synth_dataset<float>(20, 32);
        REQUIRE(a.images == b.images);
        REQUIRE(a.images != c.images);
        // image i depends on (seed, i) only, not on the dataset size
        Dataset<float> longer = make_synth_dataset<float>(25, 31);
        REQUIRE(longer.image(13) == a.image(13));
    }
    SECTION("balanced labels, sane ink statistics") {
        Dataset<float> ds = make_synth_dataset<float>(200, 8);
        std::vector<int> counts(10, 0);
        for (int l : ds.labels) counts[static_cast<std::size_t>(l)]++;
        for (int c : counts) REQUIRE(c == 20);
        for (int i = 0; i < ds.n(); ++i) {
            const Tensor<float> img = ds.image(i);
            double lo = 1e9, hi = -1e9, ink = 0;
            for (std::size_t p = 0; p < img.size(); ++p) {
                lo = std::min(lo, static_cast<double>(img.flat(p)));
                hi = std::max(hi, static_cast<double>(img.flat(p)));
                if (img.flat(p) > 0.5) ink += 1.0;
            }
            REQUIRE(lo >= 0.0);
            REQUIRE(hi <= 1.0);
            REQUIRE(hi > 0.8);                     // a solid stroke core exists
            const double frac = ink / static_cast<double>(img.size());
            REQUIRE(frac > 0.02);                  // not blank
            REQUIRE(frac < 0.45);                  // not flooded
        }
    }
    SECTION("distinct samples within a class") {
        Dataset<float> ds = make_synth_dataset<float>(40, 4);
        REQUIRE(ds.labels[0] == ds.labels[10]);
        REQUIRE(ds.image(0) != ds.image(10));
    }
    SECTION("validation") {
        REQUIRE_THROWS_AS(make_synth_dataset<float>(0, 1), std::invalid_argument);
    }
}
