#include <catch2/catch_amalgamated.hpp>

#include "hitpr/harness.hpp"
#include "hitpr/selfcheck.hpp"

using namespace hitpr;

namespace {

struct WorkDir {
    fs::path root;
    explicit WorkDir(const std::string& name) : root(fs::path("harness_work") / name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~WorkDir() { fs::remove_all(root); }
    std::string operator/(const std::string& leaf) const { return (root / leaf).string(); }
};

HiTPRConfig small_config() {
    HiTPRConfig c = selfcheck::tiny_config();
    c.k = 8;
    c.n_pos = 1;
    c.n_neg = 2;
    c.epochs = 2;
    c.lr_init = 1e-3;
    c.lr_final = 1e-3;
    return c;
}

}  // namespace

TEST_CASE("submap files round-trip and check their size") {
    WorkDir wd("submap");
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::vector<Point3> pts(4096);
    for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
    std::string path = wd / "a.bin";
    save_submap(path, pts);
    REQUIRE(fs::file_size(path) == 98304);  // 4096 points x 24 bytes
    REQUIRE(load_submap(path) == pts);

    SECTION("truncated files are rejected") {
        std::ofstream out(wd / "bad.bin", std::ios::binary);
        out.write("xyz", 3);
        out.close();
        REQUIRE_THROWS_WITH(load_submap(wd / "bad.bin"),
                            Catch::Matchers::ContainsSubstring("multiple of 24"));
    }
    SECTION("missing files are rejected") { REQUIRE_THROWS(load_submap(wd / "missing.bin")); }
}

TEST_CASE("catalog round-trip and validation") {
    WorkDir wd("catalog");
    SubmapCatalog cat;
    for (int i = 0; i < 3; ++i) {
        CatalogEntry e;
        e.id = "m" + std::to_string(i);
        e.northing = i * 1.5;
        e.easting = -i * 2.5;
        cat.entries.push_back(e);
        save_submap((wd.root / (e.id + ".bin")).string(), {{0, 0, 0}, {1, 1, 1}});
    }
    std::string csv = wd / "catalog.csv";
    save_catalog(cat, csv);
    SubmapCatalog loaded = load_catalog(csv, wd.root.string());
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(loaded.entries[i].id == cat.entries[i].id);
        REQUIRE(loaded.entries[i].northing == cat.entries[i].northing);
        REQUIRE(loaded.entries[i].easting == cat.entries[i].easting);
    }

    auto write_csv = [&](const std::string& text) {
        std::ofstream out(wd / "bad.csv");
        out << text;
    };
    SECTION("bad header") {
        write_csv("northing,easting,id\n");
        REQUIRE_THROWS_WITH(load_catalog(wd / "bad.csv", wd.root.string()),
                            Catch::Matchers::ContainsSubstring("bad header"));
    }
    SECTION("malformed row names its line") {
        write_csv("id,northing,easting\nm0,1.0\n");
        REQUIRE_THROWS_WITH(load_catalog(wd / "bad.csv", wd.root.string()),
                            Catch::Matchers::ContainsSubstring("line 2"));
    }
    SECTION("non-numeric pose") {
        write_csv("id,northing,easting\nm0,abc,1.0\n");
        REQUIRE_THROWS_WITH(load_catalog(wd / "bad.csv", wd.root.string()),
                            Catch::Matchers::ContainsSubstring("bad number"));
    }
    SECTION("duplicate ids name the offender") {
        write_csv("id,northing,easting\nm0,1,1\nm0,2,2\n");
        REQUIRE_THROWS_WITH(load_catalog(wd / "bad.csv", wd.root.string()),
                            Catch::Matchers::ContainsSubstring("duplicate id 'm0'"));
    }
    SECTION("missing submap file") {
        write_csv("id,northing,easting\nghost,1,1\n");
        REQUIRE_THROWS_WITH(load_catalog(wd / "bad.csv", wd.root.string()),
                            Catch::Matchers::ContainsSubstring("ghost"));
        // the check is optional for pose-only uses
        REQUIRE_NOTHROW(load_catalog(wd / "bad.csv", wd.root.string(), false));
    }
}

TEST_CASE("gen_synthetic writes a loadable, well-separated dataset") {
    WorkDir wd("gen");
    SubmapCatalog cat = gen_synthetic(wd.root.string(), 4, 3, 64, 100.0, 2.0, 7);
    REQUIRE(cat.size() == 12);
    SubmapCatalog reloaded = load_catalog(wd / "catalog.csv", wd.root.string());
    REQUIRE(reloaded.size() == 12);
    for (const auto& e : reloaded.entries) {
        PointCloud c = load_cloud(e);
        REQUIRE(c.size() == 64);
        REQUIRE(c.pose.has_value());
    }

    SECTION("same place is a positive pair, different places are negatives") {
        auto place_of = [](const std::string& id) { return id.substr(0, id.find('_')); };
        for (const auto& a : reloaded.entries)
            for (const auto& b : reloaded.entries) {
                if (a.id == b.id) continue;
                double dn = a.northing - b.northing, de = a.easting - b.easting;
                double d = std::sqrt(dn * dn + de * de);
                if (place_of(a.id) == place_of(b.id))
                    REQUIRE(d <= kPositiveRadiusM);
                else
                    REQUIRE(d > kNegativeRadiusM);
            }
    }
    SECTION("generation is deterministic per seed") {
        WorkDir wd2("gen2");
        gen_synthetic(wd2.root.string(), 4, 3, 64, 100.0, 2.0, 7);
        for (const auto& e : reloaded.entries) {
            auto a = load_submap((wd.root / (e.id + ".bin")).string());
            auto b = load_submap((wd2.root / (e.id + ".bin")).string());
            REQUIRE(a == b);
        }
    }
    SECTION("parameter validation") {
        REQUIRE_THROWS_AS(gen_synthetic(wd.root.string(), 2, 2, 8, 100.0, 6.0, 1),
                          std::invalid_argument);  // jitter > 5
        REQUIRE_THROWS_AS(gen_synthetic(wd.root.string(), 2, 2, 8, 52.0, 2.0, 1),
                          std::invalid_argument);  // spacing too small for the label radii
        REQUIRE_THROWS_AS(gen_synthetic(wd.root.string(), 0, 2, 8, 100.0, 2.0, 1),
                          std::invalid_argument);
    }
}

TEST_CASE("query_topn matches a brute-force scan") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    DescriptorIndex idx;
    std::size_t count = 20, w = 6;
    idx.descriptors = Tensor({count, w});
    for (std::size_t i = 0; i < count * w; ++i) idx.descriptors[i] = u(rng);
    for (std::size_t i = 0; i < count; ++i) {
        idx.ids.push_back("d" + std::to_string(i));
        idx.poses.push_back({0, 0});
    }
    std::vector<double> query(w);
    for (int trial = 0; trial < 20; ++trial) {
        for (double& v : query) v = u(rng);
        std::size_t n = 1 + rng() % count;
        auto got = query_topn(idx, query, n);
        REQUIRE(got.size() == n);
        std::vector<std::size_t> want(count);
        std::iota(want.begin(), want.end(), std::size_t{0});
        std::stable_sort(want.begin(), want.end(), [&](std::size_t a, std::size_t b) {
            double da = pairwise_sq_dist(query, {idx.descriptors.data() + a * w, w});
            double db = pairwise_sq_dist(query, {idx.descriptors.data() + b * w, w});
            if (da != db) return da < db;
            return idx.ids[a] < idx.ids[b];
        });
        want.resize(n);
        REQUIRE(got == want);
    }

    SECTION("excluded id never appears") {
        for (double& v : query) v = u(rng);
        auto got = query_topn(idx, query, count - 1, "d3");
        REQUIRE(std::find(got.begin(), got.end(), std::size_t{3}) == got.end());
    }
    SECTION("n larger than the index is rejected") {
        REQUIRE_THROWS_AS(query_topn(idx, query, count + 1), std::invalid_argument);
    }
    SECTION("width mismatch is rejected") {
        std::vector<double> bad(w + 1, 0.0);
        REQUIRE_THROWS_AS(query_topn(idx, bad, 1), std::invalid_argument);
    }
}

TEST_CASE("training on a synthetic set is deterministic and logged") {
    WorkDir wd("train");
    SubmapCatalog cat = gen_synthetic((wd.root / "data").string(), 4, 3, 64, 100.0, 2.0, 5);
    HiTPRConfig cfg = small_config();

    Model m1 = make_model(cfg, 3);
    fs::create_directories(wd / "run1");
    TrainResult r1 = train(cat, m1, 17, wd / "run1");
    REQUIRE_FALSE(r1.log.empty());
    REQUIRE(r1.epoch_mean_loss.size() == cfg.epochs);
    REQUIRE(fs::exists(fs::path(wd / "run1") / "checkpoint_final.bin"));
    REQUIRE(fs::exists(fs::path(wd / "run1") / "checkpoint_epoch1.bin"));

    SECTION("identical seeds give identical loss logs") {
        Model m2 = make_model(cfg, 3);
        TrainResult r2 = train(cat, m2, 17);
        REQUIRE(r1.log.size() == r2.log.size());
        for (std::size_t i = 0; i < r1.log.size(); ++i) {
            REQUIRE(r1.log[i].epoch == r2.log[i].epoch);
            REQUIRE(r1.log[i].step == r2.log[i].step);
            REQUIRE(r1.log[i].loss == r2.log[i].loss);
            REQUIRE(r1.log[i].term_neg == r2.log[i].term_neg);
            REQUIRE(r1.log[i].term_other == r2.log[i].term_other);
            REQUIRE(r1.log[i].lr == r2.log[i].lr);
        }
    }
    SECTION("loss log file has the expected schema") {
        save_loss_log(r1.log, wd / "loss.csv");
        std::ifstream in(wd / "loss.csv");
        std::string header;
        std::getline(in, header);
        REQUIRE(header == "epoch,step,loss,term_neg,term_other,lr");
        std::size_t rows = 0;
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) ++rows;
        REQUIRE(rows == r1.log.size());
    }
    SECTION("zero epochs still writes the initial parameters") {
        HiTPRConfig zero = cfg;
        zero.epochs = 0;
        Model m0 = make_model(zero, 3);
        fs::create_directories(wd / "run0");
        TrainResult r0 = train(cat, m0, 17, wd / "run0");
        REQUIRE(r0.log.empty());
        REQUIRE(fs::exists(fs::path(wd / "run0") / "checkpoint_final.bin"));
    }
    SECTION("the learning rate decays linearly across epochs") {
        HiTPRConfig decay = cfg;
        decay.epochs = 3;
        decay.lr_init = 3e-4;
        decay.lr_final = 1e-4;
        Model md = make_model(decay, 3);
        TrainResult rd = train(cat, md, 17);
        std::vector<double> lr_by_epoch(decay.epochs, -1.0);
        for (const auto& row : rd.log) lr_by_epoch[row.epoch - 1] = row.lr;
        REQUIRE(lr_by_epoch[0] == Catch::Approx(3e-4));
        REQUIRE(lr_by_epoch[1] == Catch::Approx(2e-4));
        REQUIRE(lr_by_epoch[2] == Catch::Approx(1e-4));
    }
}

TEST_CASE("train rejects a catalog without quadruplets") {
    WorkDir wd("train_bad");
    // two isolated places: no anchor has both positives and an extra negative
    SubmapCatalog cat;
    for (int i = 0; i < 2; ++i) {
        CatalogEntry e;
        e.id = "solo" + std::to_string(i);
        e.northing = i * 60.0;
        cat.entries.push_back(e);
        std::mt19937_64 rng(i);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::vector<Point3> pts(64);
        for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
        save_submap((wd.root / (e.id + ".bin")).string(), pts);
        cat.entries.back().file = (wd.root / (e.id + ".bin")).string();
    }
    Model m = make_model(small_config(), 1);
    REQUIRE_THROWS_WITH(train(cat, m, 1), Catch::Matchers::ContainsSubstring("no valid quadruplets"));
}

TEST_CASE("evaluate produces a monotone 25-point recall curve") {
    WorkDir wd("eval");
    SubmapCatalog cat = gen_synthetic(wd.root.string(), 4, 3, 64, 100.0, 2.0, 9);
    Model m = make_model(small_config(), 7);
    EvalReport rep = evaluate(cat, cat, m, 25.0);
    REQUIRE(rep.query_count == cat.size());
    REQUIRE(rep.recall_curve.size() == kRecallCurvePoints);
    for (std::size_t n = 1; n < rep.recall_curve.size(); ++n)
        REQUIRE(rep.recall_curve[n] >= rep.recall_curve[n - 1]);
    for (double v : rep.recall_curve) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    REQUIRE(rep.recall_at_1 == rep.recall_curve[0]);

    SECTION("success radius zero scores nothing (self-matches are excluded)") {
        EvalReport none = evaluate(cat, cat, m, 0.0);
        for (double v : none.recall_curve) REQUIRE(v == 0.0);
        REQUIRE(none.recall_at_1pct == 0.0);
    }
    SECTION("recall curve file has header plus 25 rows") {
        save_recall_curve(rep, wd / "curve.csv");
        std::ifstream in(wd / "curve.csv");
        std::string header;
        std::getline(in, header);
        REQUIRE(header == "n,recall");
        std::size_t rows = 0;
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) ++rows;
        REQUIRE(rows == 25);
    }
}

TEST_CASE("descriptor files carry float32 rows plus a manifest") {
    WorkDir wd("desc");
    SubmapCatalog cat = gen_synthetic(wd.root.string(), 2, 2, 64, 100.0, 2.0, 13);
    Model m = make_model(small_config(), 5);
    DescriptorIndex idx = build_index(cat, m);
    REQUIRE(idx.size() == 4);

    save_descriptors(idx, wd / "descriptors.f32", wd / "manifest.csv");
    REQUIRE(fs::file_size(wd / "descriptors.f32") == 4 * m.cfg.d_g * sizeof(float));

    std::ifstream man(wd / "manifest.csv");
    std::string header;
    std::getline(man, header);
    REQUIRE(header == "id,offset");
    std::size_t row = 0;
    for (std::string line; std::getline(man, line); ++row) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        REQUIRE(line.substr(0, comma) == idx.ids[row]);
        REQUIRE(std::stoull(line.substr(comma + 1)) == row * m.cfg.d_g * sizeof(float));
    }
    REQUIRE(row == 4);

    // stored f32 values match the double descriptors after rounding
    std::ifstream vecs(wd / "descriptors.f32", std::ios::binary);
    std::vector<float> stored(4 * m.cfg.d_g);
    vecs.read(reinterpret_cast<char*>(stored.data()), std::streamsize(stored.size() * sizeof(float)));
    REQUIRE(vecs.gcount() == std::streamsize(stored.size() * sizeof(float)));
    for (std::size_t i = 0; i < stored.size(); ++i)
        REQUIRE(stored[i] == float(idx.descriptors[i]));
}
