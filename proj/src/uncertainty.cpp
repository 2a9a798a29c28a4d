#include "uqseg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "uqseg/io.hpp"
#include "uqseg/synth.hpp"

namespace uqseg {

std::string to_string(UEKind kind)
{
    switch (kind) {
    case UEKind::confidence: return "confidence";
    case UEKind::entropy: return "entropy";
    case UEKind::mi: return "mi";
    case UEKind::epkl: return "epkl";
    }
    return "unknown";
}

UEKind parse_ue_kind(const std::string& s)
{
    for (UEKind k : kAllUEKinds)
        if (to_string(k) == s) return k;
    throw std::invalid_argument("unknown uncertainty estimate '" + s +
                                "' (expected confidence|entropy|mi|epkl)");
}

const Tensor& UncertaintyMaps::get(UEKind kind) const
{
    switch (kind) {
    case UEKind::confidence: return confidence;
    case UEKind::entropy: return entropy;
    case UEKind::mi: return mi;
    case UEKind::epkl: return epkl;
    }
    throw std::logic_error("unhandled uncertainty estimate");
}

namespace {

double shannon(const double* p, std::size_t c, std::size_t stride)
{
    double h = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        const double v = p[k * stride];
        h -= v * std::log(v + kLogEpsilon);
    }
    return h;
}

double renyi(const double* p, std::size_t c, std::size_t stride, double alpha)
{
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::pow(p[k * stride], alpha);
    return std::log(std::max(s, kLogEpsilon)) / (1.0 - alpha);
}

} // namespace

Tensor confidence_map(const SampleStack& stack)
{
    const Tensor mean = mean_prediction(stack);
    const std::size_t c = stack.classes(), plane = stack.height() * stack.width();
    Tensor out({stack.height(), stack.width()});
    for (std::size_t i = 0; i < plane; ++i) {
        double m = mean[i];
        for (std::size_t k = 1; k < c; ++k) m = std::max(m, mean[k * plane + i]);
        out[i] = m;
    }
    return out;
}

Tensor renyi_entropy_map(const Tensor& mean_probs, double alpha)
{
    if (alpha == 1.0) throw std::invalid_argument("renyi_entropy_map: alpha must differ from 1");
    if (mean_probs.ndim() != 3)
        throw std::invalid_argument("renyi_entropy_map: expected C x H x W probabilities");
    const std::size_t c = mean_probs.dim(0), plane = mean_probs.dim(1) * mean_probs.dim(2);
    Tensor out({mean_probs.dim(1), mean_probs.dim(2)});
    for (std::size_t i = 0; i < plane; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += mean_probs[k * plane + i];
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("renyi_entropy_map: pixel " + std::to_string(i) +
                                        " is not a probability simplex (sum " +
                                        std::to_string(s) + ")");
        out[i] = renyi(mean_probs.data() + i, c, plane, alpha);
    }
    return out;
}

Tensor mutual_information_map(const SampleStack& stack)
{
    const Tensor mean = mean_prediction(stack);
    const std::size_t t_count = stack.count(), c = stack.classes();
    const std::size_t plane = stack.height() * stack.width();
    Tensor out({stack.height(), stack.width()});
    for (std::size_t i = 0; i < plane; ++i) {
        double expected = 0.0;
        for (std::size_t t = 0; t < t_count; ++t)
            expected += shannon(stack.probs.data() + t * c * plane + i, c, plane);
        out[i] = shannon(mean.data() + i, c, plane) - expected / static_cast<double>(t_count);
    }
    return out;
}

Tensor epkl_map(const SampleStack& stack)
{
    const Tensor mean = mean_prediction(stack);
    const std::size_t t_count = stack.count(), c = stack.classes();
    const std::size_t plane = stack.height() * stack.width();
    Tensor out({stack.height(), stack.width()});
    for (std::size_t i = 0; i < plane; ++i) {
        double total = 0.0;
        for (std::size_t t = 0; t < t_count; ++t) {
            const double* p = stack.probs.data() + t * c * plane + i;
            for (std::size_t k = 0; k < c; ++k) {
                const double pk = p[k * plane];
                const double qk = mean[k * plane + i];
                total += pk * std::log((pk + kLogEpsilon) / (qk + kLogEpsilon));
            }
        }
        out[i] = total / static_cast<double>(t_count);
    }
    return out;
}

UncertaintyMaps compute_maps(const SampleStack& stack, EntropyMode mode, double alpha)
{
    UncertaintyMaps m;
    m.source = stack.kind;
    m.confidence = confidence_map(stack);
    if (mode == EntropyMode::of_mean) {
        m.entropy = renyi_entropy_map(mean_prediction(stack), alpha);
    } else {
        m.entropy = Tensor({stack.height(), stack.width()});
        for (std::size_t t = 0; t < stack.count(); ++t) m.entropy += renyi_entropy_map(stack.sample(t), alpha);
        m.entropy *= 1.0 / static_cast<double>(stack.count());
    }
    m.mi = mutual_information_map(stack);
    m.epkl = epkl_map(stack);
    return m;
}

std::string to_string(Reduction r)
{
    return r == Reduction::mean_all ? "mean_all" : "mean_foreground_band";
}

Reduction parse_reduction(const std::string& s)
{
    if (s == "mean_all") return Reduction::mean_all;
    if (s == "mean_foreground_band") return Reduction::mean_foreground_band;
    throw std::invalid_argument("unknown reduction '" + s +
                                "' (expected mean_all|mean_foreground_band)");
}

double image_score(const Tensor& map, Reduction reduction, const Tensor* foreground)
{
    if (map.empty()) throw std::invalid_argument("image_score: empty map");
    if (reduction == Reduction::mean_foreground_band) {
        if (foreground == nullptr)
            throw std::invalid_argument("image_score: band reduction needs a foreground mask");
        require_same_shape(map, *foreground, "image_score");
        const Tensor band = synth::dilate(*foreground, 3);
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < map.size(); ++i) {
            if (band[i] > 0.5) {
                s += map[i];
                ++n;
            }
        }
        if (n > 0) return s / static_cast<double>(n);
    }
    double s = 0.0;
    for (double v : map.values()) s += v;
    return s / static_cast<double>(map.size());
}

UEScores image_scores(const UncertaintyMaps& maps, Reduction reduction, const Tensor* foreground)
{
    UEScores s{};
    for (UEKind k : kAllUEKinds)
        s[static_cast<std::size_t>(k)] = image_score(maps.get(k), reduction, foreground);
    return s;
}

NormalizationStats fit_normalization(std::span<const UEScores> raw)
{
    if (raw.size() < 2) throw std::invalid_argument("normalization needs at least 2 images");
    NormalizationStats st;
    st.min = raw[0];
    st.max = raw[0];
    for (const auto& r : raw) {
        for (std::size_t k = 0; k < 4; ++k) {
            st.min[k] = std::min(st.min[k], r[k]);
            st.max[k] = std::max(st.max[k], r[k]);
        }
    }
    return st;
}

UEScores normalize(const UEScores& raw, const NormalizationStats& stats)
{
    UEScores out{};
    for (std::size_t k = 0; k < 4; ++k) {
        const double range = stats.max[k] - stats.min[k];
        out[k] = range > 0.0 ? std::clamp((raw[k] - stats.min[k]) / range, 0.0, 1.0) : 0.5;
    }
    return out;
}

std::vector<double> normalize_scores(std::span<const double> column)
{
    if (column.size() < 2) throw std::invalid_argument("normalization needs at least 2 images");
    const auto [lo, hi] = std::minmax_element(column.begin(), column.end());
    const double range = *hi - *lo;
    std::vector<double> out;
    out.reserve(column.size());
    for (double v : column) out.push_back(range > 0.0 ? (v - *lo) / range : 0.5);
    return out;
}

void save_normalization(const std::filesystem::path& path, const NormalizationStats& stats)
{
    std::vector<std::pair<std::string, std::string>> kv;
    for (UEKind k : kAllUEKinds) {
        const auto i = static_cast<std::size_t>(k);
        kv.emplace_back(to_string(k) + ".min", io::format_double(stats.min[i]));
        kv.emplace_back(to_string(k) + ".max", io::format_double(stats.max[i]));
    }
    io::write_key_values(path, kv);
}

NormalizationStats load_normalization(const std::filesystem::path& path)
{
    const auto kv = io::read_key_values(path);
    auto find = [&](const std::string& key) {
        for (const auto& [k, v] : kv)
            if (k == key) return io::parse_double(v, path.string());
        throw std::runtime_error(path.string() + ": missing '" + key + "'");
    };
    NormalizationStats st;
    for (UEKind k : kAllUEKinds) {
        const auto i = static_cast<std::size_t>(k);
        st.min[i] = find(to_string(k) + ".min");
        st.max[i] = find(to_string(k) + ".max");
    }
    return st;
}

AggregateWeights AggregateWeights::parse(const std::string& csv)
{
    std::vector<double> v;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) v.push_back(io::parse_double(item, "--weights"));
    if (v.size() != 4) throw std::invalid_argument("--weights expects four values wC,wE,wM,wK");
    for (double w : v)
        if (!(w >= 0.0)) throw std::invalid_argument("--weights must be non-negative");
    return {v[0], v[1], v[2], v[3]};
}

double aggregate_score(double c, double e, double mi, double epkl, const AggregateWeights& w)
{
    return w.confidence * c - w.entropy * e + w.mi * mi - w.epkl * epkl;
}

NormalizationStats fill_scores(ScoreTable& rows, const AggregateWeights& weights,
                               const std::optional<NormalizationStats>& stats)
{
    NormalizationStats st;
    if (stats) {
        st = *stats;
    } else {
        std::vector<UEScores> raw;
        for (const auto& r : rows) raw.push_back(r.raw);
        st = fit_normalization(raw);
    }
    for (auto& r : rows) {
        r.normalized = normalize(r.raw, st);
        r.u_tot = aggregate_score(r.normalized[0], r.normalized[1], r.normalized[2],
                                  r.normalized[3], weights);
    }
    return st;
}

FlagOrder parse_flag_order(const std::string& s)
{
    if (s == "asc") return FlagOrder::ascending;
    if (s == "desc") return FlagOrder::descending;
    throw std::invalid_argument("unknown order '" + s + "' (expected asc|desc)");
}

void rank_and_flag(ScoreTable& rows, std::size_t k, FlagOrder order)
{
    std::sort(rows.begin(), rows.end(), [order](const ScoreRow& a, const ScoreRow& b) {
        if (a.u_tot != b.u_tot)
            return order == FlagOrder::ascending ? a.u_tot < b.u_tot : a.u_tot > b.u_tot;
        return a.id < b.id;
    });
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].rank = i + 1;
        rows[i].flagged = i < k;
    }
}

namespace {

const std::vector<std::string> kScoreColumns = {
    "id",     "conf_raw", "ent_raw", "mi_raw", "epkl_raw",  "conf_n",   "ent_n",
    "mi_n",   "epkl_n",   "u_tot",   "rank",   "flagged",   "pred_dice", "true_dice"};

std::string opt(const std::optional<double>& v)
{
    return v ? io::format_double(*v) : std::string();
}

} // namespace

void write_score_table(const std::filesystem::path& path, const ScoreTable& rows)
{
    io::CsvTable t;
    t.columns = kScoreColumns;
    for (const auto& r : rows) {
        std::vector<std::string> f{r.id};
        for (double v : r.raw) f.push_back(io::format_double(v));
        for (double v : r.normalized) f.push_back(io::format_double(v));
        f.push_back(io::format_double(r.u_tot));
        f.push_back(std::to_string(r.rank));
        f.push_back(r.flagged ? "1" : "0");
        f.push_back(opt(r.pred_dice));
        f.push_back(opt(r.true_dice));
        t.rows.push_back(std::move(f));
    }
    io::write_csv(path, t);
}

ScoreTable read_score_table(const std::filesystem::path& path)
{
    const io::CsvTable t = io::read_csv(path);
    const std::string ctx = path.string();
    // Raw-score files from the ue stage carry only the first five columns.
    const bool full = std::find(t.columns.begin(), t.columns.end(), "u_tot") != t.columns.end();
    ScoreTable rows;
    for (const auto& f : t.rows) {
        ScoreRow r;
        r.id = f[t.column("id")];
        r.raw = {io::parse_double(f[t.column("conf_raw")], ctx),
                 io::parse_double(f[t.column("ent_raw")], ctx),
                 io::parse_double(f[t.column("mi_raw")], ctx),
                 io::parse_double(f[t.column("epkl_raw")], ctx)};
        if (full) {
            r.normalized = {io::parse_double(f[t.column("conf_n")], ctx),
                            io::parse_double(f[t.column("ent_n")], ctx),
                            io::parse_double(f[t.column("mi_n")], ctx),
                            io::parse_double(f[t.column("epkl_n")], ctx)};
            r.u_tot = io::parse_double(f[t.column("u_tot")], ctx);
            r.rank = io::parse_size(f[t.column("rank")], ctx);
            r.flagged = f[t.column("flagged")] == "1";
            if (const auto& s = f[t.column("pred_dice")]; !s.empty())
                r.pred_dice = io::parse_double(s, ctx);
            if (const auto& s = f[t.column("true_dice")]; !s.empty())
                r.true_dice = io::parse_double(s, ctx);
        } else if (std::find(t.columns.begin(), t.columns.end(), "true_dice") != t.columns.end()) {
            if (const auto& s = f[t.column("true_dice")]; !s.empty())
                r.true_dice = io::parse_double(s, ctx);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace uqseg
