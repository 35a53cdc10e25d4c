#include <catch2/catch_amalgamated.hpp>

#include "hitpr/descriptor.hpp"
#include "hitpr/selfcheck.hpp"

using namespace hitpr;
using selfcheck::random_cloud;
using selfcheck::tiny_config;

TEST_CASE("descriptor has the configured width") {
    HiTPRConfig cfg = tiny_config();
    Model m = make_model(cfg, 1);
    std::mt19937_64 rng(2);
    GlobalDescriptor d = extract_descriptor(m, random_cloud(rng, 40, "a"));
    REQUIRE(d.vec.size() == cfg.d_g);
    REQUIRE(d.cloud_id == "a");

    SECTION("width follows d_g") {
        HiTPRConfig wide = cfg;
        wide.d_g = 16;
        Model m2 = make_model(wide, 1);
        REQUIRE(extract_descriptor(m2, random_cloud(rng, 40)).vec.size() == 16);
    }
}

TEST_CASE("config validation rejects zero dimensions and margins") {
    HiTPRConfig c = tiny_config();
    c.d_g = 0;
    REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.alpha = 0.0;
    REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("too-small clouds are rejected with a named precondition") {
    Model m = make_model(tiny_config(), 1);
    std::mt19937_64 rng(3);
    PointCloud tiny = random_cloud(rng, 3, "small");
    REQUIRE_THROWS_WITH(extract_descriptor(m, tiny),
                        Catch::Matchers::ContainsSubstring("small") &&
                            Catch::Matchers::ContainsSubstring("3 points"));
}

TEST_CASE("max pooling over cells feeds the descriptor") {
    // with a single cell the pooled vector is that cell's activation row
    HiTPRConfig cfg = tiny_config();
    cfg.tau = 32;  // 32-point cloud -> exactly one cell
    cfg.k = 4;
    Model m = make_model(cfg, 5);
    std::mt19937_64 rng(7);
    PointCloud c = random_cloud(rng, 32);
    CellSet cs = build_cells(c, cfg.tau, cfg.k);
    REQUIRE(cs.n_cells == 1);
    Tape t;
    Var f_s = srt_attention(srt_project(embed_cells(cs, c, t, m.embed_mlp), t, m.srt),
                            positional_encoding(cs, t, m.srt.gamma_mlp), cs.k, t, m.srt)
                  .features;
    Var f_l = lrt_stack(f_s, t, m.lrt, cs.n_cells, Mode::eval);
    Var pre = ops::relu(ops::batch_norm(ops::linear(f_l, t, m.agg_lin), t, m.agg_bn, Mode::eval));
    Var agg = aggregate(f_l, t, m, cs.n_cells, Mode::eval);
    for (std::size_t i = 0; i < agg.val().numel(); ++i)
        REQUIRE(agg.val()[i] == Catch::Approx(pre.val()[i]).margin(1e-14));
}

TEST_CASE("descriptor is invariant to point permutations") {
    Model m = make_model(tiny_config(), 9);
    std::mt19937_64 rng(11);
    for (int cloud_i = 0; cloud_i < 3; ++cloud_i) {
        PointCloud c = random_cloud(rng, 48);
        GlobalDescriptor base = extract_descriptor(m, c);
        for (int perm = 0; perm < 5; ++perm) {
            PointCloud shuffled = c;
            std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);
            GlobalDescriptor d = extract_descriptor(m, shuffled);
            for (std::size_t i = 0; i < d.vec.size(); ++i)
                REQUIRE(selfcheck::rel_err(base.vec[i], d.vec[i]) <= 1e-6);
        }
    }
}

TEST_CASE("batched forward equals per-cloud forward in eval mode") {
    HiTPRConfig cfg = tiny_config();
    Model m = make_model(cfg, 13);
    std::mt19937_64 rng(17);
    std::vector<PointCloud> clouds;
    std::vector<CellSet> cells;
    for (int i = 0; i < 3; ++i) {
        clouds.push_back(random_cloud(rng, 32, "c" + std::to_string(i)));
        cells.push_back(build_cells(clouds.back(), cfg.tau, cfg.k));
    }
    std::vector<const PointCloud*> cp{&clouds[0], &clouds[1], &clouds[2]};
    std::vector<const CellSet*> csp{&cells[0], &cells[1], &cells[2]};
    Tape t;
    Var batch = forward_batch(m, t, cp, csp, Mode::eval);
    REQUIRE(batch.val().dim(0) == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        GlobalDescriptor single = extract_descriptor(m, clouds[i]);
        for (std::size_t c = 0; c < cfg.d_g; ++c)
            REQUIRE(batch.val().at(i, c) == Catch::Approx(single.vec[c]).margin(1e-10));
    }
}

TEST_CASE("forward_batch validates its inputs") {
    HiTPRConfig cfg = tiny_config();
    Model m = make_model(cfg, 1);
    std::mt19937_64 rng(19);
    PointCloud a = random_cloud(rng, 32), b = random_cloud(rng, 48);
    CellSet ca = build_cells(a, cfg.tau, cfg.k), cb = build_cells(b, cfg.tau, cfg.k);
    Tape t;
    REQUIRE_THROWS_AS(forward_batch(m, t, {}, {}, Mode::eval), std::invalid_argument);
    REQUIRE_THROWS_AS(forward_batch(m, t, {&a, &b}, {&ca, &cb}, Mode::eval), std::invalid_argument);
}

TEST_CASE("optional L2 normalization lands descriptors on the unit sphere") {
    HiTPRConfig cfg = tiny_config();
    cfg.l2_normalize = true;
    Model m = make_model(cfg, 21);
    std::mt19937_64 rng(23);
    GlobalDescriptor d = extract_descriptor(m, random_cloud(rng, 40));
    double norm = 0.0;
    for (double v : d.vec) norm += v * v;
    REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("checkpoint round-trips the whole model bitwise") {
    HiTPRConfig cfg = tiny_config();
    Model m = make_model(cfg, 31);
    std::mt19937_64 rng(37);
    PointCloud c = random_cloud(rng, 40, "x");
    GlobalDescriptor before = extract_descriptor(m, c);

    std::string path = "ckpt_model_roundtrip.bin";
    save_checkpoint(m.params(), path);
    Model fresh = make_model(cfg, 99);  // different init
    load_checkpoint(fresh.params(), path);
    GlobalDescriptor after = extract_descriptor(fresh, c);
    REQUIRE(before.vec == after.vec);

    SECTION("mismatched architecture is rejected") {
        HiTPRConfig other = cfg;
        other.d_g = cfg.d_g * 2;
        Model wrong = make_model(other, 1);
        REQUIRE_THROWS(load_checkpoint(wrong.params(), path));
    }
    std::remove(path.c_str());
}

TEST_CASE("param_count covers every learnable tensor") {
    HiTPRConfig cfg = tiny_config();
    Model m = make_model(cfg, 1);
    std::size_t by_hand = 0;
    for (const ParamTensor* p : m.params()) by_hand += p->value.numel();
    REQUIRE(param_count(m) == by_hand);

    SECTION("default configuration lands in the expected band") {
        Model full = make_model(HiTPRConfig{}, 1);
        std::size_t n = param_count(full);
        REQUIRE(n == 2162560);
        REQUIRE(n >= 2'000'000);
        REQUIRE(n <= 3'500'000);
    }
}

TEST_CASE("model construction is deterministic per seed") {
    HiTPRConfig cfg = tiny_config();
    Model a = make_model(cfg, 42), b = make_model(cfg, 42), c = make_model(cfg, 43);
    std::mt19937_64 rng(41);
    PointCloud cloud = random_cloud(rng, 40);
    REQUIRE(extract_descriptor(a, cloud).vec == extract_descriptor(b, cloud).vec);
    REQUIRE(extract_descriptor(a, cloud).vec != extract_descriptor(c, cloud).vec);
}
