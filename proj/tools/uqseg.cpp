// uqseg command-line front end. One subcommand per pipeline stage.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "uqseg/io.hpp"
#include "uqseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace uqseg;
using namespace uqseg::pipeline;

namespace {

struct UMFlags {
    std::string um = "mcd";
    std::size_t T = 10;
    std::size_t M = 3;
    std::size_t K = 10;
    std::vector<double> angles;

    void add(CLI::App* app)
    {
        app->add_option("--um", um, "Uncertainty model")
            ->check(CLI::IsMember({"mcd", "ensemble", "tta"}))
            ->capture_default_str();
        app->add_option("--T", T, "MC dropout passes")->capture_default_str();
        app->add_option("--M", M, "Ensemble members")->capture_default_str();
        app->add_option("--K", K, "TTA rotations")->capture_default_str();
        app->add_option("--angles", angles, "Explicit TTA angles in degrees")->delimiter(',');
    }

    UMConfig config(std::uint64_t seed) const
    {
        UMConfig c;
        c.kind = parse_um_kind(um);
        c.mcd_passes = T;
        c.ensemble_size = M;
        c.tta_count = K;
        if (!angles.empty()) c.tta_angles = angles;
        c.seed = seed;
        return c;
    }
};

struct SourceFlags {
    std::string stacks;
    std::string segnets;
    UMFlags um;

    void add(CLI::App* app)
    {
        auto* s = app->add_option("--stacks", stacks, "Directory of precomputed stacks");
        auto* n = app->add_option("--segnets", segnets, "Segmenter directory to sample from");
        s->excludes(n);
        um.add(app);
    }

    StackSource source(std::uint64_t seed) const
    {
        StackSource src;
        if (!stacks.empty()) src.stacks = stacks;
        if (!segnets.empty()) src.segnets = segnets;
        src.um = um.config(seed);
        return src;
    }
};

EntropyMode parse_mode(const std::string& s)
{
    return s == "mean_of_samples" ? EntropyMode::mean_of_samples : EntropyMode::of_mean;
}

// Appends "--key=value" for every config-file entry not already given on the
// command line, so explicit flags win.
std::vector<std::string> expand_config(std::vector<std::string> args, CLI::App& app)
{
    std::string config;
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
        } else {
            kept.push_back(args[i]);
        }
    }
    if (config.empty()) return kept;

    CLI::App* sub = nullptr;
    for (const auto& a : kept)
        if (!a.empty() && a[0] != '-') {
            sub = app.get_subcommand_ptr(a).get();
            break;
        }
    if (sub == nullptr) throw std::runtime_error("--config needs a subcommand");

    for (const auto& [key, value] : io::read_key_values(config)) {
        const std::string flag = "--" + key;
        if (sub->get_option_no_throw(flag) == nullptr)
            throw std::runtime_error(config + ": unknown key '" + key + "' for command " +
                                     sub->get_name());
        bool given = false;
        for (const auto& a : kept)
            if (a == flag || a.rfind(flag + "=", 0) == 0) given = true;
        if (!given) kept.push_back(flag + "=" + value);
    }
    return kept;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Uncertainty-aware segmentation quality prediction"};
    app.require_subcommand(1);
    app.add_option("--config", "key=value file; flags on the command line take precedence");

    // datagen
    DatagenOptions dg;
    std::string dg_out;
    auto* c_datagen = app.add_subcommand("datagen", "Generate a synthetic corpus");
    c_datagen->add_option("--out", dg_out, "Output directory")->required();
    c_datagen->add_option("--n", dg.spec.n_images, "Number of images")->capture_default_str();
    c_datagen->add_option("--side", dg.spec.side, "Image side length")->capture_default_str();
    c_datagen->add_option("--contrast", dg.spec.contrast)->capture_default_str();
    c_datagen->add_option("--noise", dg.spec.noise_sigma, "Gaussian noise sigma")->capture_default_str();
    c_datagen->add_option("--ambiguous", dg.spec.ambiguous_fraction, "Fraction of ambiguous images")
        ->capture_default_str();
    c_datagen->add_option("--seed", dg.spec.seed)->capture_default_str();

    // train-seg
    TrainSegOptions ts;
    std::string ts_corpus, ts_out;
    auto* c_train_seg = app.add_subcommand("train-seg", "Train the segmenter (or an ensemble)");
    c_train_seg->add_option("--corpus", ts_corpus)->required();
    c_train_seg->add_option("--out", ts_out, "Output directory")->required();
    c_train_seg->add_option("--epochs", ts.train.epochs)->capture_default_str();
    c_train_seg->add_option("--batch", ts.train.batch_size)->capture_default_str();
    c_train_seg->add_option("--lr", ts.train.lr)->capture_default_str();
    c_train_seg->add_option("--dropout", ts.net.dropout)->capture_default_str();
    c_train_seg->add_option("--ensemble", ts.ensemble, "Number of independently seeded nets")
        ->capture_default_str();
    c_train_seg->add_option("--seed", ts.train.seed)->capture_default_str();

    // sample
    std::string sm_corpus, sm_segnets, sm_out, sm_split = "test";
    std::uint64_t sm_seed = 42;
    UMFlags sm_um;
    auto* c_sample = app.add_subcommand("sample", "Draw prediction stacks for a split");
    c_sample->add_option("--corpus", sm_corpus)->required();
    c_sample->add_option("--segnets", sm_segnets)->required();
    c_sample->add_option("--out", sm_out)->required();
    c_sample->add_option("--split", sm_split)
        ->check(CLI::IsMember({"train", "test", "all"}))
        ->capture_default_str();
    c_sample->add_option("--seed", sm_seed)->capture_default_str();
    sm_um.add(c_sample);

    // ue
    std::string ue_stacks, ue_out, ue_corpus, ue_mode = "of_mean", ue_reduction = "mean_all";
    bool ue_pgm = false, ue_no_maps = false;
    auto* c_ue = app.add_subcommand("ue", "Uncertainty maps and raw per-image scores");
    c_ue->add_option("--stacks", ue_stacks)->required();
    c_ue->add_option("--out", ue_out)->required();
    c_ue->add_option("--corpus", ue_corpus, "Adds true Dice and enables the foreground band");
    c_ue->add_option("--entropy-mode", ue_mode)
        ->check(CLI::IsMember({"of_mean", "mean_of_samples"}))
        ->capture_default_str();
    c_ue->add_option("--reduction", ue_reduction)
        ->check(CLI::IsMember({"mean_all", "mean_foreground_band"}))
        ->capture_default_str();
    c_ue->add_flag("--pgm", ue_pgm, "Also write PGM heatmaps");
    c_ue->add_flag("--no-maps", ue_no_maps, "Skip writing map tensors");

    // scores
    std::string sc_raw, sc_out, sc_stats, sc_weights = "0.4,0.2,0.2,0.2";
    bool sc_reuse = false;
    auto* c_scores = app.add_subcommand("scores", "Normalize raw scores and aggregate");
    c_scores->add_option("--raw", sc_raw)->required();
    c_scores->add_option("--out", sc_out)->required();
    c_scores->add_option("--stats", sc_stats, "Normalization file")->required();
    c_scores->add_option("--weights", sc_weights, "wC,wE,wM,wK")->capture_default_str();
    c_scores->add_flag("--reuse-stats", sc_reuse, "Read --stats instead of fitting");

    // train-qp
    TrainQPOptions tq;
    std::string tq_corpus, tq_out, tq_ue = "entropy", tq_arch = "three_way", tq_mode = "of_mean";
    SourceFlags tq_src;
    auto* c_train_qp = app.add_subcommand("train-qp", "Train the quality predictor");
    c_train_qp->add_option("--corpus", tq_corpus)->required();
    c_train_qp->add_option("--out", tq_out, "Model file")->required();
    tq_src.add(c_train_qp);
    c_train_qp->add_option("--ue", tq_ue)
        ->check(CLI::IsMember({"confidence", "entropy", "mi", "epkl"}))
        ->capture_default_str();
    c_train_qp->add_option("--arch", tq_arch)
        ->check(CLI::IsMember({"two_way_seg", "two_way_img", "three_way"}))
        ->capture_default_str();
    c_train_qp->add_option("--entropy-mode", tq_mode)
        ->check(CLI::IsMember({"of_mean", "mean_of_samples"}))
        ->capture_default_str();
    c_train_qp->add_option("--epochs", tq.train.epochs)->capture_default_str();
    c_train_qp->add_option("--batch", tq.train.batch_size)->capture_default_str();
    c_train_qp->add_option("--lr", tq.train.lr)->capture_default_str();
    c_train_qp->add_option("--seed", tq.train.seed)->capture_default_str();

    // eval-qp
    std::string eq_qnet, eq_corpus, eq_out, eq_split = "test";
    std::uint64_t eq_seed = 42;
    SourceFlags eq_src;
    auto* c_eval_qp = app.add_subcommand("eval-qp", "Evaluate predicted against true Dice");
    c_eval_qp->add_option("--qnet", eq_qnet)->required();
    c_eval_qp->add_option("--corpus", eq_corpus)->required();
    c_eval_qp->add_option("--out", eq_out)->required();
    c_eval_qp->add_option("--split", eq_split)
        ->check(CLI::IsMember({"train", "test", "all"}))
        ->capture_default_str();
    c_eval_qp->add_option("--seed", eq_seed)->capture_default_str();
    eq_src.add(c_eval_qp);

    // rank
    std::string rk_scores, rk_out, rk_order = "asc";
    std::size_t rk_k = 20;
    auto* c_rank = app.add_subcommand("rank", "Rank images by aggregate score and flag the top k");
    c_rank->add_option("--scores", rk_scores)->required();
    c_rank->add_option("--out", rk_out)->required();
    c_rank->add_option("--k", rk_k)->capture_default_str();
    c_rank->add_option("--order", rk_order)->check(CLI::IsMember({"asc", "desc"}))->capture_default_str();

    // gradcam
    std::string gc_qnet, gc_corpus, gc_out, gc_id;
    int gc_branch = -1;
    bool gc_no_relu = false;
    std::uint64_t gc_seed = 42;
    SourceFlags gc_src;
    auto* c_gradcam = app.add_subcommand("gradcam", "Grad-CAM heatmaps for one image");
    c_gradcam->add_option("--qnet", gc_qnet)->required();
    c_gradcam->add_option("--corpus", gc_corpus)->required();
    c_gradcam->add_option("--id", gc_id)->required();
    c_gradcam->add_option("--out", gc_out)->required();
    c_gradcam->add_option("--branch", gc_branch, "Branch index, -1 for all")->capture_default_str();
    c_gradcam->add_flag("--no-relu", gc_no_relu);
    c_gradcam->add_option("--seed", gc_seed)->capture_default_str();
    gc_src.add(c_gradcam);

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = expand_config(std::move(args), app);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (c_datagen->parsed()) {
            dg.out = dg_out;
            const Corpus c = cmd_datagen(dg);
            std::cout << "wrote " << c.samples.size() << " images to " << dg_out << '\n';
        } else if (c_train_seg->parsed()) {
            ts.corpus = ts_corpus;
            ts.out = ts_out;
            const auto nets = cmd_train_seg(ts);
            std::cout << "trained " << nets.size() << " segmenter(s) into " << ts_out << '\n';
        } else if (c_sample->parsed()) {
            SampleOptions o;
            o.corpus = sm_corpus;
            o.segnets = sm_segnets;
            o.out = sm_out;
            o.split = parse_split(sm_split);
            o.um = sm_um.config(sm_seed);
            const auto ids = cmd_sample(o);
            std::cout << "wrote " << ids.size() << " stacks to " << sm_out << '\n';
        } else if (c_ue->parsed()) {
            UEOptions o;
            o.stacks = ue_stacks;
            o.out = ue_out;
            if (!ue_corpus.empty()) o.corpus = ue_corpus;
            o.entropy_mode = parse_mode(ue_mode);
            o.reduction = parse_reduction(ue_reduction);
            o.write_pgm = ue_pgm;
            o.write_maps = !ue_no_maps;
            const auto rows = cmd_ue(o);
            std::cout << "scored " << rows.size() << " images into " << ue_out << '\n';
        } else if (c_scores->parsed()) {
            ScoresOptions o;
            o.raw = sc_raw;
            o.out = sc_out;
            o.stats = sc_stats;
            o.weights = AggregateWeights::parse(sc_weights);
            o.reuse_stats = sc_reuse;
            cmd_scores(o);
            std::cout << "wrote " << sc_out << '\n';
        } else if (c_train_qp->parsed()) {
            tq.corpus = tq_corpus;
            tq.out = tq_out;
            tq.source = tq_src.source(tq.train.seed);
            tq.ue = parse_ue_kind(tq_ue);
            tq.arch = parse_quality_arch(tq_arch);
            tq.entropy_mode = parse_mode(tq_mode);
            QPTrainReport rep;
            cmd_train_qp(tq, &rep);
            std::cout << "final train mse " << io::format_double(rep.final_train_mse) << '\n';
        } else if (c_eval_qp->parsed()) {
            EvalQPOptions o;
            o.qnet = eq_qnet;
            o.corpus = eq_corpus;
            o.out = eq_out;
            o.split = parse_split(eq_split);
            o.source = eq_src.source(eq_seed);
            const auto r = cmd_eval_qp(o);
            std::cout << "r2 " << io::format_double(r.r2) << "\npcc " << io::format_double(r.pcc)
                      << "\nrmse " << io::format_double(r.rmse) << "\nn " << r.n << '\n';
        } else if (c_rank->parsed()) {
            RankOptions o;
            o.scores = rk_scores;
            o.out = rk_out;
            o.k = rk_k;
            o.order = parse_flag_order(rk_order);
            for (const auto& r : cmd_rank(o))
                if (r.flagged) std::cout << r.id << '\n';
        } else if (c_gradcam->parsed()) {
            GradCamCmdOptions o;
            o.qnet = gc_qnet;
            o.corpus = gc_corpus;
            o.id = gc_id;
            o.out = gc_out;
            if (gc_branch >= 0) o.branch = static_cast<std::size_t>(gc_branch);
            o.apply_relu = !gc_no_relu;
            o.source = gc_src.source(gc_seed);
            const auto maps = cmd_gradcam(o);
            std::cout << "wrote " << maps.size() << " heatmap(s) to " << gc_out << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
