#pragma once

// File-based pipeline stages. Each cmd_* reads the artifacts of earlier stages,
// writes its own, and leaves a run manifest next to its outputs.
//
// On-disk corpus layout (written by cmd_datagen):
//   <dir>/images/<id>.uqt   1 x H x W, f32
//   <dir>/masks/<id>.uqt    H x W, f32
//   <dir>/manifest.csv      id,is_ambiguous,split,label_dice
//   <dir>/corpus.cfg        generator settings

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uqseg/metrics.hpp"
#include "uqseg/quality_net.hpp"
#include "uqseg/sampler.hpp"
#include "uqseg/segmenter.hpp"
#include "uqseg/synth.hpp"
#include "uqseg/uncertainty.hpp"

namespace uqseg::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "1.0.0";

// key=value record of everything needed to redo a run. `created_at` is the only
// field that differs between identical runs and is left out of the hash.
struct RunManifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> entries;

    void set(const std::string& key, std::string value);
    std::uint64_t config_hash() const;
    void write(const fs::path& path) const;
};

RunManifest read_manifest(const fs::path& path);

// ---------------------------------------------------------------------------
// Corpus

enum class SplitSel { train, test, all };
SplitSel parse_split(const std::string& s);
std::string to_string(SplitSel s);

struct Corpus {
    synth::CorpusSpec spec;
    std::vector<synth::SyntheticSample> samples;
    std::vector<std::string> split; // "train" or "test", parallel to samples

    std::vector<const synth::SyntheticSample*> select(SplitSel which) const;
    const synth::SyntheticSample& by_id(const std::string& id) const;
};

Corpus load_corpus(const fs::path& dir);

struct DatagenOptions {
    synth::CorpusSpec spec;
    fs::path out;
};
Corpus cmd_datagen(const DatagenOptions& opt);

// ---------------------------------------------------------------------------
// Segmenter

struct TrainSegOptions {
    fs::path corpus;
    fs::path out; // directory; receives segnet_<m>.uqm
    SegTrainConfig train;
    SegNetConfig net;
    std::size_t ensemble = 1;
};
std::vector<SegNet> cmd_train_seg(const TrainSegOptions& opt);

std::vector<SegNet> load_segnets(const fs::path& dir);

// ---------------------------------------------------------------------------
// Sampling and uncertainty

struct SampleOptions {
    fs::path corpus;
    fs::path segnets;
    fs::path out; // stack directory
    SplitSel split = SplitSel::test;
    UMConfig um;
};
// Returns the ids written, in corpus order.
std::vector<std::string> cmd_sample(const SampleOptions& opt);

// Ids of every stack in a directory, sorted.
std::vector<std::string> list_stacks(const fs::path& dir);

struct UEOptions {
    fs::path stacks;
    fs::path out;
    std::optional<fs::path> corpus; // adds true_dice and enables the foreground band
    EntropyMode entropy_mode = EntropyMode::of_mean;
    Reduction reduction = Reduction::mean_all;
    bool write_maps = true;
    bool write_pgm = false;
};
// Writes maps/<id>.<ue>.uqt, optional pgm/<id>.<ue>.pgm and raw_scores.csv.
ScoreTable cmd_ue(const UEOptions& opt);

struct ScoresOptions {
    fs::path raw;
    fs::path out;   // scores CSV
    fs::path stats; // normalization file written (or read when reuse_stats)
    AggregateWeights weights;
    bool reuse_stats = false;
};
ScoreTable cmd_scores(const ScoresOptions& opt);

struct RankOptions {
    fs::path scores;
    fs::path out; // ranked CSV; flagged ids go to <out stem>.flagged.txt
    std::size_t k = 20;
    FlagOrder order = FlagOrder::ascending;
};
ScoreTable cmd_rank(const RankOptions& opt);

// ---------------------------------------------------------------------------
// Quality prediction

// Where per-image stacks come from: a stack directory, or fresh sampling with
// the given segmenters.
struct StackSource {
    std::optional<fs::path> stacks;
    std::optional<fs::path> segnets;
    UMConfig um;
};

std::vector<ImageFeatures> collect_features(const Corpus& corpus,
                                            const std::vector<const synth::SyntheticSample*>& items,
                                            const StackSource& source, EntropyMode mode);

struct TrainQPOptions {
    fs::path corpus;
    StackSource source;
    fs::path out; // .uqm file
    UEKind ue = UEKind::entropy;
    QualityArch arch = QualityArch::three_way;
    EntropyMode entropy_mode = EntropyMode::of_mean;
    QPTrainConfig train;
};
QualityNet cmd_train_qp(const TrainQPOptions& opt, QPTrainReport* report = nullptr);

struct EvalQPOptions {
    fs::path qnet;
    fs::path corpus;
    StackSource source;
    fs::path out; // directory: metrics.csv, scatter.csv
    SplitSel split = SplitSel::test;
};
metrics::MetricReport cmd_eval_qp(const EvalQPOptions& opt);

struct GradCamCmdOptions {
    fs::path qnet;
    fs::path corpus;
    StackSource source;
    std::string id;
    std::optional<std::size_t> branch; // all branches when unset
    fs::path out;
    bool apply_relu = true;
};
// Writes <id>.branch<b>.pgm (upscaled to the input size) and the raw map as .uqt.
std::vector<Tensor> cmd_gradcam(const GradCamCmdOptions& opt);

} // namespace uqseg::pipeline
