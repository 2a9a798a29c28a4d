#include "uqseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "uqseg/io.hpp"

namespace uqseg::pipeline {

namespace {

std::string timestamp()
{
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string fmt(double v) { return io::format_double(v); }
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt_seed(std::uint64_t v) { return std::to_string(v); }

void require_file(const fs::path& p)
{
    if (!fs::is_regular_file(p)) throw std::runtime_error(p.string() + ": file not found");
}

void require_dir(const fs::path& p)
{
    if (!fs::is_directory(p)) throw std::runtime_error(p.string() + ": directory not found");
}

void add_um(RunManifest& m, const UMConfig& um)
{
    m.set("um", to_string(um.kind));
    m.set("um.seed", fmt_seed(um.seed));
    m.set("um.mcd_passes", fmt(um.mcd_passes));
    m.set("um.ensemble_size", fmt(um.ensemble_size));
    m.set("um.tta_count", fmt(um.tta_count));
    if (um.tta_angles) {
        std::string s;
        for (double a : *um.tta_angles) s += (s.empty() ? "" : ",") + fmt(a);
        m.set("um.tta_angles", s);
    }
}

void add_source(RunManifest& m, const StackSource& src)
{
    if (src.stacks) m.set("stacks", src.stacks->string());
    if (src.segnets) {
        m.set("segnets", src.segnets->string());
        add_um(m, src.um);
    }
}

std::string to_string(EntropyMode mode)
{
    return mode == EntropyMode::of_mean ? "of_mean" : "mean_of_samples";
}

EntropyMode parse_entropy_mode(const std::string& s)
{
    if (s == "of_mean") return EntropyMode::of_mean;
    if (s == "mean_of_samples") return EntropyMode::mean_of_samples;
    throw std::invalid_argument("unknown entropy mode '" + s + "'");
}

fs::path manifest_path(const fs::path& out, const std::string& command)
{
    // Directory outputs hold the manifest inside; file outputs get a sibling.
    if (out.has_extension()) return fs::path(out.string() + ".manifest");
    return out / (command + ".manifest");
}

std::vector<std::string> ue_columns()
{
    return {"id", "conf_raw", "ent_raw", "mi_raw", "epkl_raw", "true_dice"};
}

} // namespace

// ---------------------------------------------------------------------------

void RunManifest::set(const std::string& key, std::string value)
{
    for (auto& [k, v] : entries)
        if (k == key) {
            v = std::move(value);
            return;
        }
    entries.emplace_back(key, std::move(value));
}

std::uint64_t RunManifest::config_hash() const
{
    std::vector<std::pair<std::string, std::string>> sorted = entries;
    std::sort(sorted.begin(), sorted.end());
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        h ^= 0xFF;
        h *= 1099511628211ULL;
    };
    feed(command);
    for (const auto& [k, v] : sorted) {
        feed(k);
        feed(v);
    }
    return h;
}

void RunManifest::write(const fs::path& path) const
{
    std::vector<std::pair<std::string, std::string>> out;
    out.emplace_back("command", command);
    out.emplace_back("version", kVersion);
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash()));
    out.emplace_back("config_hash", hash);
    for (const auto& e : entries) out.push_back(e);
    out.emplace_back("created_at", timestamp());
    io::write_key_values(path, out);
}

RunManifest read_manifest(const fs::path& path)
{
    RunManifest m;
    for (auto& [k, v] : io::read_key_values(path)) {
        if (k == "command")
            m.command = v;
        else if (k != "version" && k != "config_hash" && k != "created_at")
            m.entries.emplace_back(k, v);
    }
    return m;
}

// ---------------------------------------------------------------------------

SplitSel parse_split(const std::string& s)
{
    if (s == "train") return SplitSel::train;
    if (s == "test") return SplitSel::test;
    if (s == "all") return SplitSel::all;
    throw std::invalid_argument("unknown split '" + s + "' (expected train|test|all)");
}

std::string to_string(SplitSel s)
{
    switch (s) {
    case SplitSel::train: return "train";
    case SplitSel::test: return "test";
    case SplitSel::all: return "all";
    }
    return "unknown";
}

std::vector<const synth::SyntheticSample*> Corpus::select(SplitSel which) const
{
    std::vector<const synth::SyntheticSample*> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (which == SplitSel::all || split[i] == to_string(which)) out.push_back(&samples[i]);
    return out;
}

const synth::SyntheticSample& Corpus::by_id(const std::string& id) const
{
    for (const auto& s : samples)
        if (s.id == id) return s;
    throw std::invalid_argument("image id '" + id + "' is not in the corpus");
}

Corpus cmd_datagen(const DatagenOptions& opt)
{
    opt.spec.validate();
    Corpus c;
    c.spec = opt.spec;
    c.samples = synth::generate_corpus(opt.spec);
    const synth::Split split = synth::split_corpus(c.samples, opt.spec.seed);
    c.split.assign(c.samples.size(), "test");
    for (std::size_t i : split.train) c.split[i] = "train";

    fs::create_directories(opt.out / "images");
    fs::create_directories(opt.out / "masks");
    io::CsvTable manifest;
    manifest.columns = {"id", "is_ambiguous", "split", "label_dice"};
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        const auto& s = c.samples[i];
        io::save_uqt(opt.out / "images" / (s.id + ".uqt"), s.image);
        io::save_uqt(opt.out / "masks" / (s.id + ".uqt"), s.gt_mask);
        manifest.rows.push_back({s.id, s.is_ambiguous ? "1" : "0", c.split[i], fmt(s.label_dice)});
    }
    io::write_csv(opt.out / "manifest.csv", manifest);

    const std::vector<std::pair<std::string, std::string>> cfg = {
        {"n_images", fmt(opt.spec.n_images)},
        {"side", fmt(opt.spec.side)},
        {"contrast", fmt(opt.spec.contrast)},
        {"noise_sigma", fmt(opt.spec.noise_sigma)},
        {"ambiguous_fraction", fmt(opt.spec.ambiguous_fraction)},
        {"seed", fmt_seed(opt.spec.seed)}};
    io::write_key_values(opt.out / "corpus.cfg", cfg);

    RunManifest m{"datagen", {}};
    for (const auto& [k, v] : cfg) m.set(k, v);
    m.set("train", fmt(split.train.size()));
    m.set("test", fmt(split.test.size()));
    m.set("ambiguous", fmt(opt.spec.ambiguous_count()));
    m.write(manifest_path(opt.out, "datagen"));
    // Reload so in-memory images carry the same f32 rounding as the files.
    return load_corpus(opt.out);
}

Corpus load_corpus(const fs::path& dir)
{
    require_dir(dir);
    require_file(dir / "corpus.cfg");
    require_file(dir / "manifest.csv");
    Corpus c;
    const std::string cfg_path = (dir / "corpus.cfg").string();
    std::map<std::string, std::string> cfg;
    for (auto& [k, v] : io::read_key_values(dir / "corpus.cfg")) cfg[k] = v;
    auto need = [&](const std::string& k) -> const std::string& {
        auto it = cfg.find(k);
        if (it == cfg.end()) throw std::runtime_error(cfg_path + ": missing key '" + k + "'");
        return it->second;
    };
    c.spec.n_images = io::parse_size(need("n_images"), cfg_path);
    c.spec.side = io::parse_size(need("side"), cfg_path);
    c.spec.contrast = io::parse_double(need("contrast"), cfg_path);
    c.spec.noise_sigma = io::parse_double(need("noise_sigma"), cfg_path);
    c.spec.ambiguous_fraction = io::parse_double(need("ambiguous_fraction"), cfg_path);
    c.spec.seed = io::parse_size(need("seed"), cfg_path);

    const io::CsvTable t = io::read_csv(dir / "manifest.csv");
    const std::size_t ci = t.column("id"), ca = t.column("is_ambiguous"), cs = t.column("split"),
                      cl = t.column("label_dice");
    if (t.rows.size() != c.spec.n_images)
        throw std::runtime_error((dir / "manifest.csv").string() + ": " +
                                 std::to_string(t.rows.size()) + " rows, corpus.cfg says " +
                                 std::to_string(c.spec.n_images));
    const std::size_t side = c.spec.side;
    for (const auto& row : t.rows) {
        synth::SyntheticSample s;
        s.id = row[ci];
        s.is_ambiguous = row[ca] == "1";
        s.label_dice = io::parse_double(row[cl], (dir / "manifest.csv").string());
        const fs::path ip = dir / "images" / (s.id + ".uqt");
        const fs::path mp = dir / "masks" / (s.id + ".uqt");
        s.image = io::load_uqt(ip);
        s.gt_mask = io::load_uqt(mp);
        if (s.image.shape() != Shape{1, side, side})
            throw std::runtime_error(ip.string() + ": shape " + shape_string(s.image.shape()) +
                                     " does not match corpus side " + std::to_string(side));
        if (s.gt_mask.shape() != Shape{side, side})
            throw std::runtime_error(mp.string() + ": shape " + shape_string(s.gt_mask.shape()) +
                                     " does not match corpus side " + std::to_string(side));
        if (row[cs] != "train" && row[cs] != "test")
            throw std::runtime_error((dir / "manifest.csv").string() + ": bad split '" + row[cs] + "'");
        c.split.push_back(row[cs]);
        c.samples.push_back(std::move(s));
    }
    return c;
}

// ---------------------------------------------------------------------------

std::vector<SegNet> cmd_train_seg(const TrainSegOptions& opt)
{
    if (opt.ensemble == 0) throw std::invalid_argument("--ensemble must be at least 1");
    const Corpus corpus = load_corpus(opt.corpus);
    SegNetConfig net_cfg = opt.net;
    net_cfg.side = corpus.spec.side;
    const auto train = corpus.select(SplitSel::train);
    fs::create_directories(opt.out);

    RunManifest m{"train-seg", {}};
    m.set("corpus", opt.corpus.string());
    m.set("epochs", fmt(opt.train.epochs));
    m.set("batch", fmt(opt.train.batch_size));
    m.set("lr", fmt(opt.train.lr));
    m.set("seed", fmt_seed(opt.train.seed));
    m.set("dropout", fmt(net_cfg.dropout));
    m.set("ensemble", fmt(opt.ensemble));

    std::vector<SegNet> nets;
    for (std::size_t i = 0; i < opt.ensemble; ++i) {
        SegTrainConfig cfg = opt.train;
        // Member 0 uses the run seed so a single net matches the ensemble's first member.
        if (i > 0) cfg.seed = mix_seed(opt.train.seed, 1000 + i);
        SegTrainReport report;
        nets.push_back(train_segmenter(train, cfg, net_cfg, &report));
        const std::string name = "segnet_" + std::to_string(i);
        save_segnet(opt.out / (name + ".uqm"), nets.back());
        m.set(name + ".seed", fmt_seed(cfg.seed));
        m.set(name + ".final_loss", fmt(report.epoch_loss.back()));
    }
    m.write(manifest_path(opt.out, "train-seg"));
    return nets;
}

std::vector<SegNet> load_segnets(const fs::path& dir)
{
    if (fs::is_regular_file(dir)) return {load_segnet(dir)};
    require_dir(dir);
    std::vector<SegNet> nets;
    for (std::size_t i = 0;; ++i) {
        const fs::path p = dir / ("segnet_" + std::to_string(i) + ".uqm");
        if (!fs::exists(p)) break;
        nets.push_back(load_segnet(p));
    }
    if (nets.empty()) throw std::runtime_error(dir.string() + ": no segnet_<i>.uqm files");
    for (const auto& n : nets)
        if (n.config().side != nets.front().config().side)
            throw std::runtime_error(dir.string() + ": ensemble members disagree on resolution");
    return nets;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<SegNet> nets_for(const UMConfig& um, std::vector<SegNet> nets, const fs::path& where)
{
    if (um.kind == UMKind::ensemble) {
        if (nets.size() < um.ensemble_size)
            throw std::runtime_error(where.string() + ": ensemble of " +
                                     std::to_string(um.ensemble_size) + " requested but only " +
                                     std::to_string(nets.size()) + " segnets found");
        nets.resize(um.ensemble_size);
    } else {
        nets.resize(1);
    }
    return nets;
}

void check_resolution(const Corpus& corpus, const std::vector<SegNet>& nets, const fs::path& where)
{
    if (nets.front().config().side != corpus.spec.side)
        throw std::runtime_error(where.string() + ": segnet resolution " +
                                 std::to_string(nets.front().config().side) +
                                 " does not match corpus side " + std::to_string(corpus.spec.side));
}

} // namespace

std::vector<std::string> cmd_sample(const SampleOptions& opt)
{
    const Corpus corpus = load_corpus(opt.corpus);
    const auto nets = nets_for(opt.um, load_segnets(opt.segnets), opt.segnets);
    check_resolution(corpus, nets, opt.segnets);
    const auto items = corpus.select(opt.split);
    fs::create_directories(opt.out);

    const auto n = static_cast<long>(items.size());
    std::vector<std::string> errors(items.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        const auto* s = items[static_cast<std::size_t>(i)];
        try {
            save_stack(opt.out, s->id, sample_stack(opt.um, nets, s->image, stack_stream(s->id)));
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);
    std::vector<std::string> ids;
    for (const auto* s : items) ids.push_back(s->id);

    RunManifest m{"sample", {}};
    m.set("corpus", opt.corpus.string());
    m.set("segnets", opt.segnets.string());
    m.set("split", to_string(opt.split));
    add_um(m, opt.um);
    m.set("images", fmt(ids.size()));
    m.write(manifest_path(opt.out, "sample"));
    return ids;
}

std::vector<std::string> list_stacks(const fs::path& dir)
{
    require_dir(dir);
    std::vector<std::string> ids;
    const std::string suffix = ".meta.csv";
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > suffix.size() && name.ends_with(suffix))
            ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw std::runtime_error(dir.string() + ": no stacks found");
    return ids;
}

ScoreTable cmd_ue(const UEOptions& opt)
{
    const auto ids = list_stacks(opt.stacks);
    std::optional<Corpus> corpus;
    if (opt.corpus) corpus = load_corpus(*opt.corpus);
    if (opt.reduction == Reduction::mean_foreground_band && !corpus)
        throw std::invalid_argument("the foreground band reduction needs --corpus");
    fs::create_directories(opt.out);

    ScoreTable rows(ids.size());
    const auto n = static_cast<long>(ids.size());
    std::vector<std::string> errors(ids.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            const SampleStack st = load_stack(opt.stacks, ids[k]);
            const UncertaintyMaps maps = compute_maps(st, opt.entropy_mode);
            const synth::SyntheticSample* s = corpus ? &corpus->by_id(ids[k]) : nullptr;
            if (s && s->gt_mask.shape() != Shape{st.height(), st.width()})
                throw std::runtime_error(ids[k] + ": stack resolution does not match the corpus");
            const Tensor pred = hard_mask(mean_prediction(st));
            rows[k].id = ids[k];
            rows[k].raw = image_scores(maps, opt.reduction, &pred);
            if (s) rows[k].true_dice = metrics::dice(pred, s->gt_mask);
            for (UEKind ue : kAllUEKinds) {
                const std::string stem = ids[k] + "." + to_string(ue);
                if (opt.write_maps) io::save_uqt(opt.out / "maps" / (stem + ".uqt"), maps.get(ue));
                if (opt.write_pgm) io::write_pgm(opt.out / "pgm" / (stem + ".pgm"), maps.get(ue));
            }
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);

    io::CsvTable t;
    t.columns = ue_columns();
    for (const auto& r : rows) {
        std::vector<std::string> f{r.id};
        for (double v : r.raw) f.push_back(fmt(v));
        f.push_back(r.true_dice ? fmt(*r.true_dice) : "");
        t.rows.push_back(std::move(f));
    }
    io::write_csv(opt.out / "raw_scores.csv", t);

    RunManifest m{"ue", {}};
    m.set("stacks", opt.stacks.string());
    if (opt.corpus) m.set("corpus", opt.corpus->string());
    m.set("entropy_mode", to_string(opt.entropy_mode));
    m.set("reduction", to_string(opt.reduction));
    m.set("images", fmt(rows.size()));
    m.write(manifest_path(opt.out, "ue"));
    return rows;
}

ScoreTable cmd_scores(const ScoresOptions& opt)
{
    require_file(opt.raw);
    ScoreTable rows = read_score_table(opt.raw);
    if (rows.empty()) throw std::runtime_error(opt.raw.string() + ": no rows");
    std::optional<NormalizationStats> stats;
    if (opt.reuse_stats) {
        require_file(opt.stats);
        stats = load_normalization(opt.stats);
    }
    const NormalizationStats used = fill_scores(rows, opt.weights, stats);
    if (!opt.reuse_stats) save_normalization(opt.stats, used);
    write_score_table(opt.out, rows);

    RunManifest m{"scores", {}};
    m.set("raw", opt.raw.string());
    m.set("weights", fmt(opt.weights.confidence) + "," + fmt(opt.weights.entropy) + "," +
                         fmt(opt.weights.mi) + "," + fmt(opt.weights.epkl));
    m.set("stats", opt.stats.string());
    m.set("stats_reused", opt.reuse_stats ? "1" : "0");
    for (UEKind ue : kAllUEKinds) {
        const auto k = static_cast<std::size_t>(ue);
        m.set("norm." + to_string(ue) + ".min", fmt(used.min[k]));
        m.set("norm." + to_string(ue) + ".max", fmt(used.max[k]));
    }
    m.write(manifest_path(opt.out, "scores"));
    return rows;
}

ScoreTable cmd_rank(const RankOptions& opt)
{
    require_file(opt.scores);
    ScoreTable rows = read_score_table(opt.scores);
    if (rows.empty()) throw std::runtime_error(opt.scores.string() + ": no rows");
    rank_and_flag(rows, opt.k, opt.order);
    write_score_table(opt.out, rows);
    fs::path flagged = opt.out;
    flagged.replace_extension(".flagged.txt");
    std::ofstream os(flagged, std::ios::binary);
    if (!os) throw std::runtime_error(flagged.string() + ": cannot open for writing");
    for (const auto& r : rows)
        if (r.flagged) os << r.id << '\n';

    RunManifest m{"rank", {}};
    m.set("scores", opt.scores.string());
    m.set("k", fmt(opt.k));
    m.set("order", opt.order == FlagOrder::ascending ? "asc" : "desc");
    m.write(manifest_path(opt.out, "rank"));
    return rows;
}

// ---------------------------------------------------------------------------

std::vector<ImageFeatures> collect_features(const Corpus& corpus,
                                            const std::vector<const synth::SyntheticSample*>& items,
                                            const StackSource& source, EntropyMode mode)
{
    if (source.stacks.has_value() == source.segnets.has_value())
        throw std::invalid_argument("give exactly one of --stacks or --segnets");
    std::vector<SegNet> nets;
    if (source.segnets) {
        nets = nets_for(source.um, load_segnets(*source.segnets), *source.segnets);
        check_resolution(corpus, nets, *source.segnets);
    }
    std::vector<ImageFeatures> out(items.size());
    std::vector<std::string> errors(items.size());
    const auto n = static_cast<long>(items.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const auto* s = items[k];
        try {
            const SampleStack st = source.stacks ? load_stack(*source.stacks, s->id)
                                                 : sample_stack(source.um, nets, s->image,
                                                                stack_stream(s->id));
            if (st.height() != corpus.spec.side || st.width() != corpus.spec.side)
                throw std::runtime_error(s->id + ": stack resolution does not match the corpus");
            out[k] = extract_features(s->id, s->image, st, &s->gt_mask, mode);
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);
    return out;
}

QualityNet cmd_train_qp(const TrainQPOptions& opt, QPTrainReport* report)
{
    const Corpus corpus = load_corpus(opt.corpus);
    const auto items = corpus.select(SplitSel::train);
    const auto features = collect_features(corpus, items, opt.source, opt.entropy_mode);
    const auto pairs = make_pairs(features, opt.ue, opt.arch);
    QPTrainReport local;
    QPTrainReport& rep = report ? *report : local;
    const QualityNet net = train_quality_net(pairs, opt.train, opt.arch, &rep);

    std::vector<std::pair<std::string, std::string>> extra = {
        {"ue", to_string(opt.ue)}, {"entropy_mode", to_string(opt.entropy_mode)}};
    if (opt.source.segnets) extra.emplace_back("um", to_string(opt.source.um.kind));
    save_quality_net(opt.out, net, extra);

    RunManifest m{"train-qp", {}};
    m.set("corpus", opt.corpus.string());
    add_source(m, opt.source);
    m.set("ue", to_string(opt.ue));
    m.set("arch", to_string(opt.arch));
    m.set("entropy_mode", to_string(opt.entropy_mode));
    m.set("epochs", fmt(opt.train.epochs));
    m.set("batch", fmt(opt.train.batch_size));
    m.set("lr", fmt(opt.train.lr));
    m.set("seed", fmt_seed(opt.train.seed));
    m.set("pairs", fmt(pairs.size()));
    m.set("final_train_mse", fmt(rep.final_train_mse));
    const auto& norm = net.input_normalization();
    for (std::size_t b = 0; b < norm.size(); ++b)
        m.set("input_norm." + std::to_string(b), fmt(norm[b].first) + " " + fmt(norm[b].second));
    m.write(manifest_path(opt.out, "train-qp"));
    return net;
}

namespace {

struct LoadedQnet {
    QualityNet net;
    UEKind ue = UEKind::entropy;
    EntropyMode mode = EntropyMode::of_mean;
};

LoadedQnet load_qnet_with_meta(const fs::path& path)
{
    require_file(path);
    std::vector<std::pair<std::string, std::string>> extra;
    LoadedQnet q{load_quality_net(path, &extra)};
    bool have_ue = false;
    for (const auto& [k, v] : extra) {
        if (k == "ue") {
            q.ue = parse_ue_kind(v);
            have_ue = true;
        } else if (k == "entropy_mode") {
            q.mode = parse_entropy_mode(v);
        }
    }
    if (!have_ue) throw std::runtime_error(path.string() + ": missing the uncertainty estimate it was trained on");
    return q;
}

} // namespace

metrics::MetricReport cmd_eval_qp(const EvalQPOptions& opt)
{
    const LoadedQnet q = load_qnet_with_meta(opt.qnet);
    const Corpus corpus = load_corpus(opt.corpus);
    if (q.net.side() != corpus.spec.side)
        throw std::runtime_error(opt.qnet.string() + ": resolution does not match the corpus");
    const auto items = corpus.select(opt.split);
    const auto features = collect_features(corpus, items, opt.source, q.mode);
    const auto pairs = make_pairs(features, q.ue, q.net.arch());
    const auto preds = predict_quality(q.net, pairs);

    std::vector<double> y_true, y_pred;
    io::CsvTable scatter;
    scatter.columns = {"id", "true_dice", "pred_dice", "pred_raw", "cohort"};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        y_true.push_back(pairs[i].target);
        y_pred.push_back(preds[i].clamped);
        scatter.rows.push_back({pairs[i].id, fmt(pairs[i].target), fmt(preds[i].clamped),
                                fmt(preds[i].raw),
                                metrics::cohort_name(metrics::cohort_label(pairs[i].target))});
    }
    const metrics::MetricReport rep = metrics::evaluate(y_true, y_pred);
    fs::create_directories(opt.out);
    io::write_csv(opt.out / "scatter.csv", scatter);
    io::CsvTable mt;
    mt.columns = {"r2", "pcc", "rmse", "n", "poor", "good", "best"};
    mt.rows.push_back({fmt(rep.r2), fmt(rep.pcc), fmt(rep.rmse), fmt(rep.n), fmt(rep.poor),
                       fmt(rep.good), fmt(rep.best)});
    io::write_csv(opt.out / "metrics.csv", mt);

    RunManifest m{"eval-qp", {}};
    m.set("qnet", opt.qnet.string());
    m.set("corpus", opt.corpus.string());
    add_source(m, opt.source);
    m.set("split", to_string(opt.split));
    m.set("ue", to_string(q.ue));
    m.set("arch", to_string(q.net.arch()));
    m.set("r2", fmt(rep.r2));
    m.set("pcc", fmt(rep.pcc));
    m.set("rmse", fmt(rep.rmse));
    m.write(manifest_path(opt.out, "eval-qp"));
    return rep;
}

std::vector<Tensor> cmd_gradcam(const GradCamCmdOptions& opt)
{
    const LoadedQnet q = load_qnet_with_meta(opt.qnet);
    const Corpus corpus = load_corpus(opt.corpus);
    if (q.net.side() != corpus.spec.side)
        throw std::runtime_error(opt.qnet.string() + ": resolution does not match the corpus");
    const auto& sample = corpus.by_id(opt.id);
    const auto features = collect_features(corpus, {&sample}, opt.source, q.mode);
    const QualityPair pair = make_pair(features.front(), q.ue, q.net.arch());
    if (opt.branch && *opt.branch >= q.net.branch_count())
        throw std::invalid_argument("branch " + std::to_string(*opt.branch) + " out of range (" +
                                    std::to_string(q.net.branch_count()) + " branches)");

    std::vector<std::size_t> branches;
    if (opt.branch)
        branches.push_back(*opt.branch);
    else
        for (std::size_t b = 0; b < q.net.branch_count(); ++b) branches.push_back(b);

    fs::create_directories(opt.out);
    const auto roles = input_roles(q.net.arch());
    std::vector<Tensor> maps;
    for (std::size_t b : branches) {
        Tensor cam = grad_cam(q.net, pair.inputs, b, GradCamOptions{opt.apply_relu});
        const std::string stem = opt.id + ".branch" + std::to_string(b) + "_" + to_string(roles[b]);
        io::save_uqt(opt.out / (stem + ".uqt"), cam);
        io::write_pgm(opt.out / (stem + ".pgm"), upscale_nearest(cam, q.net.side()));
        maps.push_back(std::move(cam));
    }

    RunManifest m{"gradcam", {}};
    m.set("qnet", opt.qnet.string());
    m.set("corpus", opt.corpus.string());
    add_source(m, opt.source);
    m.set("id", opt.id);
    m.set("branch", opt.branch ? std::to_string(*opt.branch) : "all");
    m.set("relu", opt.apply_relu ? "1" : "0");
    m.write(manifest_path(opt.out, "gradcam"));
    return maps;
}

} // namespace uqseg::pipeline
