// hitpr: point-cloud place recognition pipeline.
// Subcommands: train, embed, eval, retrieve, gen-synthetic, selftest, param-count.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <thread>

#include "hitpr/harness.hpp"
#include "hitpr/selfcheck.hpp"

namespace {

using namespace hitpr;

struct RunConfig {
    HiTPRConfig net;
    std::string data_dir;
    std::string catalog;
    std::string checkpoint;
    std::string out_dir = ".";
    std::uint64_t seed = 1;
    double success_radius = 25.0;
    std::size_t threads = 1;
    Mode bn_mode = Mode::eval;  // BN statistics source for embedding/eval
};

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw std::runtime_error("config: bad boolean for " + key + ": " + v);
}

/// Plain key=value config file; '#' starts a comment, unknown keys rejected.
void load_run_config(const std::string& path, RunConfig& rc) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
            line.pop_back();
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key=value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        auto u = [&] { return std::stoull(val); };
        auto f = [&] { return std::stod(val); };
        HiTPRConfig& n = rc.net;
        if (key == "tau") n.tau = u();
        else if (key == "k") n.k = u();
        else if (key == "d_i") n.d_i = u();
        else if (key == "d_a") n.d_a = u();
        else if (key == "d_s") n.d_s = u();
        else if (key == "d_k") n.d_k = u();
        else if (key == "d_v") n.d_v = u();
        else if (key == "d_b") n.d_b = u();
        else if (key == "m_blocks") n.m_blocks = u();
        else if (key == "d_g") n.d_g = u();
        else if (key == "embed_hidden") n.embed_hidden = u();
        else if (key == "gamma_hidden") n.gamma_hidden = u();
        else if (key == "alpha") n.alpha = f();
        else if (key == "beta") n.beta = f();
        else if (key == "lr_init") n.lr_init = f();
        else if (key == "lr_final") n.lr_final = f();
        else if (key == "epochs") n.epochs = u();
        else if (key == "n_pos") n.n_pos = u();
        else if (key == "n_neg") n.n_neg = u();
        else if (key == "l2_normalize") n.l2_normalize = parse_bool(val, key);
        else if (key == "squared_dist") n.squared_dist = parse_bool(val, key);
        else if (key == "data_dir") rc.data_dir = val;
        else if (key == "catalog") rc.catalog = val;
        else if (key == "checkpoint") rc.checkpoint = val;
        else if (key == "out_dir") rc.out_dir = val;
        else if (key == "seed") rc.seed = u();
        else if (key == "success_radius") rc.success_radius = f();
        else if (key == "threads") rc.threads = u();
        else if (key == "bn_mode") {
            if (val == "train") rc.bn_mode = Mode::train;
            else if (val == "eval") rc.bn_mode = Mode::eval;
            else throw std::runtime_error("config: bn_mode must be train or eval");
        } else {
            throw std::runtime_error("config: unknown key '" + key + "' at line " + std::to_string(lineno));
        }
    }
    if (rc.data_dir.empty()) {
        if (const char* env = std::getenv("HITPR_DATA_DIR")) rc.data_dir = env;
    }
}

Model load_model(const RunConfig& rc) {
    Model m = make_model(rc.net, rc.seed);
    if (!rc.checkpoint.empty()) load_checkpoint(m.params(), rc.checkpoint);
    return m;
}

DescriptorIndex build_index_threaded(const SubmapCatalog& catalog, Model& model, std::size_t threads) {
    if (threads <= 1 || catalog.size() < 2) return build_index(catalog, model);
    DescriptorIndex idx;
    idx.descriptors = Tensor({catalog.size(), model.cfg.d_g});
    idx.ids.resize(catalog.size());
    idx.poses.resize(catalog.size());
    std::vector<std::thread> pool;
    std::size_t nthreads = std::min(threads, catalog.size());
    std::string error;
    std::mutex error_mu;
    for (std::size_t tid = 0; tid < nthreads; ++tid) {
        pool.emplace_back([&, tid] {
            for (std::size_t i = tid; i < catalog.size(); i += nthreads) {
                const auto& e = catalog.entries[i];
                try {
                    GlobalDescriptor d = extract_descriptor(model, load_cloud(e), Mode::eval);
                    std::copy(d.vec.begin(), d.vec.end(), idx.descriptors.data() + i * model.cfg.d_g);
                    idx.ids[i] = e.id;
                    idx.poses[i] = {e.northing, e.easting};
                } catch (const std::exception& ex) {
                    std::lock_guard<std::mutex> lk(error_mu);
                    if (error.empty()) error = "id '" + e.id + "': " + ex.what();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (!error.empty()) throw std::runtime_error("build_index: " + error);
    return idx;
}

int cmd_train(const RunConfig& rc) {
    SubmapCatalog catalog = load_catalog(rc.catalog, rc.data_dir);
    fs::create_directories(rc.out_dir);
    Model model = load_model(rc);
    TrainResult res = train(catalog, model, rc.seed, rc.out_dir);
    save_loss_log(res.log, (fs::path(rc.out_dir) / "loss_log.csv").string());
    for (std::size_t e = 0; e < res.epoch_mean_loss.size(); ++e)
        std::cout << "epoch " << (e + 1) << " mean loss " << res.epoch_mean_loss[e] << "\n";
    std::cout << "wrote " << (fs::path(rc.out_dir) / "checkpoint_final.bin").string() << "\n";
    return 0;
}

int cmd_embed(const RunConfig& rc) {
    SubmapCatalog catalog = load_catalog(rc.catalog, rc.data_dir);
    Model model = load_model(rc);
    DescriptorIndex idx = build_index_threaded(catalog, model, rc.threads);
    fs::create_directories(rc.out_dir);
    std::string vec_path = (fs::path(rc.out_dir) / "descriptors.f32").string();
    std::string man_path = (fs::path(rc.out_dir) / "descriptors_manifest.csv").string();
    save_descriptors(idx, vec_path, man_path);
    std::cout << "embedded " << idx.size() << " clouds -> " << vec_path << "\n";
    return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& query_csv, const std::string& db_csv) {
    SubmapCatalog queries = load_catalog(query_csv, rc.data_dir);
    SubmapCatalog db = load_catalog(db_csv, rc.data_dir);
    Model model = load_model(rc);
    EvalReport rep = evaluate(queries, db, model, rc.success_radius);
    fs::create_directories(rc.out_dir);
    save_recall_curve(rep, (fs::path(rc.out_dir) / "recall_curve.csv").string());
    std::cout << "queries:    " << rep.query_count << "\n";
    std::cout << "recall@1:   " << rep.recall_at_1 << "\n";
    std::cout << "recall@1%:  " << rep.recall_at_1pct << "\n";
    return 0;
}

int cmd_retrieve(const RunConfig& rc, const std::string& query_bin, std::size_t n) {
    SubmapCatalog db = load_catalog(rc.catalog, rc.data_dir);
    Model model = load_model(rc);
    DescriptorIndex idx = build_index_threaded(db, model, rc.threads);
    PointCloud q = normalize_cloud(load_submap(query_bin), "query");
    GlobalDescriptor d = extract_descriptor(model, q);
    for (std::size_t i : query_topn(idx, d.vec, std::min(n, idx.size())))
        std::cout << idx.ids[i] << "\n";
    return 0;
}

int cmd_selftest(bool quick) {
    bool all_pass = true;
    for (const auto& suite : selfcheck::run_all(quick)) {
        std::cout << (suite.pass ? "PASS" : "FAIL") << "  " << suite.name << ": " << suite.detail << "\n";
        all_pass = all_pass && suite.pass;
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HiTPR point-cloud place recognition"};
    app.require_subcommand(1);
    app.fallthrough();  // shared options may follow the subcommand name

    RunConfig rc;
    std::string config_path, flag_data_dir, flag_catalog, flag_checkpoint, flag_out;
    std::uint64_t flag_seed = 0;
    double flag_radius = 0.0;
    std::size_t flag_threads = 0, flag_epochs = 0;
    app.add_option("--config", config_path, "key=value run configuration file");
    auto* o_data = app.add_option("--data-dir", flag_data_dir, "submap directory (or $HITPR_DATA_DIR)");
    auto* o_cat = app.add_option("--catalog", flag_catalog, "catalog CSV");
    auto* o_ckpt = app.add_option("--checkpoint", flag_checkpoint, "parameter checkpoint to load");
    auto* o_out = app.add_option("--out", flag_out, "output directory");
    auto* o_seed = app.add_option("--seed", flag_seed, "RNG seed");
    auto* o_radius = app.add_option("--radius", flag_radius, "retrieval success radius in meters");
    auto* o_threads = app.add_option("--threads", flag_threads, "worker cap for embedding");
    auto* o_epochs = app.add_option("--epochs", flag_epochs, "override training epoch count");

    auto* sc_train = app.add_subcommand("train", "train on a catalog");
    auto* sc_embed = app.add_subcommand("embed", "write descriptors for a catalog");
    auto* sc_eval = app.add_subcommand("eval", "recall@N retrieval evaluation");
    std::string query_csv, db_csv, query_bin;
    sc_eval->add_option("--queries", query_csv, "query catalog CSV")->required();
    sc_eval->add_option("--db", db_csv, "database catalog CSV")->required();
    auto* sc_retrieve = app.add_subcommand("retrieve", "top-N lookup for one submap");
    std::size_t topn = 5;
    sc_retrieve->add_option("--query", query_bin, "query submap .bin")->required();
    sc_retrieve->add_option("-n", topn, "number of results");
    auto* sc_gen = app.add_subcommand("gen-synthetic", "generate a synthetic scene dataset");
    std::size_t places = 20, cpp = 4, pts = 512;
    double spacing = 100.0, jitter = 2.0;
    sc_gen->add_option("--places", places);
    sc_gen->add_option("--clouds-per-place", cpp);
    sc_gen->add_option("--points", pts);
    sc_gen->add_option("--spacing", spacing);
    sc_gen->add_option("--jitter", jitter);
    auto* sc_selftest = app.add_subcommand("selftest", "run the built-in verification suites");
    bool quick = false;
    sc_selftest->add_flag("--quick", quick, "smaller suite sizes");
    auto* sc_params = app.add_subcommand("param-count", "print the model parameter count");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!config_path.empty()) load_run_config(config_path, rc);
        // command-line flags override file values
        if (o_data->count()) rc.data_dir = flag_data_dir;
        if (o_cat->count()) rc.catalog = flag_catalog;
        if (o_ckpt->count()) rc.checkpoint = flag_checkpoint;
        if (o_out->count()) rc.out_dir = flag_out;
        if (o_seed->count()) rc.seed = flag_seed;
        if (o_radius->count()) rc.success_radius = flag_radius;
        if (o_threads->count()) rc.threads = flag_threads;
        if (o_epochs->count()) rc.net.epochs = flag_epochs;
        if (rc.data_dir.empty())
            if (const char* env = std::getenv("HITPR_DATA_DIR")) rc.data_dir = env;

        if (*sc_train) return cmd_train(rc);
        if (*sc_embed) return cmd_embed(rc);
        if (*sc_eval) return cmd_eval(rc, query_csv, db_csv);
        if (*sc_retrieve) return cmd_retrieve(rc, query_bin, topn);
        if (*sc_gen) {
            gen_synthetic(rc.out_dir, places, cpp, pts, spacing, jitter, rc.seed);
            std::cout << "wrote " << (places * cpp) << " submaps under " << rc.out_dir << "\n";
            return 0;
        }
        if (*sc_selftest) return cmd_selftest(quick);
        if (*sc_params) {
            Model m = make_model(rc.net, rc.seed);
            std::cout << "parameters: " << param_count(m) << " (reference implementation: 2.72M)\n";
            return 0;
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
