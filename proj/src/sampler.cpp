#include "uqseg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "uqseg/io.hpp"

namespace uqseg {

namespace fs = std::filesystem;

std::string to_string(UMKind kind)
{
    switch (kind) {
    case UMKind::mcd: return "mcd";
    case UMKind::ensemble: return "ensemble";
    case UMKind::tta: return "tta";
    }
    return "unknown";
}

UMKind parse_um_kind(const std::string& s)
{
    if (s == "mcd") return UMKind::mcd;
    if (s == "ensemble") return UMKind::ensemble;
    if (s == "tta") return UMKind::tta;
    throw std::invalid_argument("unknown uncertainty model '" + s + "' (expected mcd|ensemble|tta)");
}

Tensor SampleStack::sample(std::size_t t) const
{
    const std::size_t sz = classes() * height() * width();
    std::vector<double> v(probs.data() + t * sz, probs.data() + (t + 1) * sz);
    return Tensor({classes(), height(), width()}, std::move(v));
}

void validate_stack(const SampleStack& stack, double tol)
{
    const Tensor& p = stack.probs;
    if (p.ndim() != 4) throw std::invalid_argument("sample stack must be T x C x H x W, got " +
                                                   shape_string(p.shape()));
    if (p.dim(0) < 2) throw std::invalid_argument("sample stack needs at least 2 samples");
    if (p.dim(1) < 2) throw std::invalid_argument("sample stack needs at least 2 classes");
    if (!stack.meta.empty() && stack.meta.size() != p.dim(0))
        throw std::invalid_argument("sample stack metadata count does not match T");
    const std::size_t plane = p.dim(2) * p.dim(3);
    const std::size_t c = p.dim(1);
    for (std::size_t t = 0; t < p.dim(0); ++t) {
        const double* base = p.data() + t * c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double v = base[k * plane + i];
                if (!(v >= -tol && v <= 1.0 + tol))
                    throw std::invalid_argument("sample stack value outside [0, 1] in sample " +
                                                std::to_string(t));
                s += v;
            }
            if (std::abs(s - 1.0) > tol)
                throw std::invalid_argument("sample " + std::to_string(t) +
                                            " is not a per-pixel probability simplex");
        }
    }
}

SampleStack mcd_sample(const SegNet& net, const Tensor& image, std::size_t passes,
                       std::uint64_t seed)
{
    if (!net.has_dropout())
        throw std::invalid_argument("mcd_sample: network has no dropout layer");
    if (passes < 2) throw std::invalid_argument("mcd_sample: need at least 2 passes");
    const std::size_t side = net.config().side;
    if (image.shape() != Shape{1, side, side})
        throw std::invalid_argument("mcd_sample: image shape " + shape_string(image.shape()) +
                                    " does not match network resolution");
    Tensor batch({passes, 1, side, side});
    for (std::size_t t = 0; t < passes; ++t)
        std::copy_n(image.data(), image.size(), batch.data() + t * image.size());
    SampleStack s;
    s.kind = UMKind::mcd;
    s.probs = predict_probs_batch(net, batch, DropoutUse::mcd, seed);
    for (std::size_t t = 0; t < passes; ++t) s.meta.push_back({t, mix_seed(seed, t), 0, 0.0});
    return s;
}

SampleStack ensemble_sample(std::span<const SegNet> nets, const Tensor& image)
{
    if (nets.size() < 2) throw std::invalid_argument("ensemble_sample: need at least 2 members");
    const std::size_t side = nets[0].config().side;
    const std::size_t sz = 2 * side * side;
    SampleStack s;
    s.kind = UMKind::ensemble;
    s.probs = Tensor({nets.size(), 2, side, side});
    for (std::size_t m = 0; m < nets.size(); ++m) {
        if (nets[m].config().side != side)
            throw std::invalid_argument("ensemble_sample: members differ in resolution");
        const Tensor p = predict_probs(nets[m], image, DropoutUse::off);
        std::copy_n(p.data(), sz, s.probs.data() + m * sz);
        s.meta.push_back({m, 0, m, 0.0});
    }
    return s;
}

namespace {

double reflect(double x, double n)
{
    const double last = n - 1.0;
    if (last <= 0.0) return 0.0;
    const double period = 2.0 * last;
    x = std::fmod(std::abs(x), period);
    return x > last ? period - x : x;
}

} // namespace

Tensor rotate_bilinear(const Tensor& planes, double angle_deg)
{
    if (planes.ndim() != 3) throw std::invalid_argument("rotate_bilinear: expected C x H x W");
    const std::size_t c = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
    const double th = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cx = 0.5 * (static_cast<double>(w) - 1.0);
    const double cy = 0.5 * (static_cast<double>(h) - 1.0);
    Tensor out(planes.shape());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // inverse map: output pixel -> source location
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double sx = reflect(cs * dx + sn * dy + cx, static_cast<double>(w));
            const double sy = reflect(-sn * dx + cs * dy + cy, static_cast<double>(h));
            const auto x0 = std::min(static_cast<std::size_t>(sx), w - 1);
            const auto y0 = std::min(static_cast<std::size_t>(sy), h - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double fx = sx - static_cast<double>(x0);
            const double fy = sy - static_cast<double>(y0);
            for (std::size_t k = 0; k < c; ++k) {
                const double v00 = planes.at(k, y0, x0), v01 = planes.at(k, y0, x1);
                const double v10 = planes.at(k, y1, x0), v11 = planes.at(k, y1, x1);
                out.at(k, y, x) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                  fy * ((1 - fx) * v10 + fx * v11);
            }
        }
    }
    return out;
}

SampleStack tta_sample(const SegNet& net, const Tensor& image, std::size_t count,
                       std::uint64_t seed, const std::optional<std::vector<double>>& angles,
                       TtaDiagnostics* diagnostics)
{
    std::vector<double> chosen;
    if (angles) {
        chosen = *angles;
    } else {
        if (count < 2) throw std::invalid_argument("tta_sample: need at least 2 rotations");
        Rng rng(seed);
        std::uniform_real_distribution<double> unif(0.0, 360.0);
        for (std::size_t k = 0; k < count; ++k) chosen.push_back(unif(rng));
    }
    if (chosen.empty()) throw std::invalid_argument("tta_sample: empty angle set");
    const std::size_t side = net.config().side;
    if (image.shape() != Shape{1, side, side})
        throw std::invalid_argument("tta_sample: image shape " + shape_string(image.shape()) +
                                    " does not match network resolution");
    const std::size_t k_count = chosen.size();
    const std::size_t plane = side * side;
    Tensor batch({k_count, 1, side, side});
    for (std::size_t k = 0; k < k_count; ++k) {
        const Tensor r = rotate_bilinear(image, chosen[k]);
        std::copy_n(r.data(), plane, batch.data() + k * plane);
    }
    const Tensor probs = predict_probs_batch(net, batch, DropoutUse::off);

    SampleStack s;
    s.kind = UMKind::tta;
    s.probs = Tensor({k_count, 2, side, side});
    double max_dev = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
        std::vector<double> v(probs.data() + k * 2 * plane, probs.data() + (k + 1) * 2 * plane);
        Tensor back = rotate_bilinear(Tensor({2, side, side}, std::move(v)), -chosen[k]);
        for (std::size_t i = 0; i < plane; ++i) {
            double a = std::clamp(back[i], 0.0, 1.0);
            double b = std::clamp(back[plane + i], 0.0, 1.0);
            const double sum = a + b;
            max_dev = std::max(max_dev, std::abs(sum - 1.0));
            if (sum > 0.0) {
                a /= sum;
                b /= sum;
            } else {
                a = b = 0.5;
            }
            s.probs[k * 2 * plane + i] = a;
            s.probs[k * 2 * plane + plane + i] = b;
        }
        s.meta.push_back({k, seed, 0, chosen[k]});
    }
    if (diagnostics) diagnostics->max_renorm_deviation = max_dev;
    return s;
}

SampleStack sample_stack(const UMConfig& config, std::span<const SegNet> nets, const Tensor& image,
                         std::uint64_t stream)
{
    if (nets.empty()) throw std::invalid_argument("sample_stack: no segmentation network given");
    const std::uint64_t seed = mix_seed(config.seed, stream);
    switch (config.kind) {
    case UMKind::mcd: return mcd_sample(nets[0], image, config.mcd_passes, seed);
    case UMKind::ensemble: return ensemble_sample(nets, image);
    case UMKind::tta: return tta_sample(nets[0], image, config.tta_count, seed, config.tta_angles);
    }
    throw std::logic_error("sample_stack: unhandled uncertainty model");
}

std::uint64_t stack_stream(const std::string& id)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : id) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Tensor mean_prediction(const SampleStack& stack)
{
    const std::size_t t_count = stack.count();
    const std::size_t sz = stack.classes() * stack.height() * stack.width();
    // Sum in ascending member index so a permuted stack gives identical bits.
    std::vector<std::size_t> order(t_count);
    for (std::size_t t = 0; t < t_count; ++t) order[t] = t;
    if (stack.meta.size() == t_count)
        std::sort(order.begin(), order.end(), [&stack](std::size_t a, std::size_t b) {
            return stack.meta[a].index < stack.meta[b].index;
        });
    Tensor mean({stack.classes(), stack.height(), stack.width()});
    for (std::size_t t : order) {
        const double* src = stack.probs.data() + t * sz;
        for (std::size_t i = 0; i < sz; ++i) mean[i] += src[i];
    }
    mean *= 1.0 / static_cast<double>(t_count);
    return mean;
}

void save_stack(const fs::path& dir, const std::string& id, const SampleStack& stack)
{
    io::save_uqt(dir / (id + ".uqt"), stack.probs, io::DType::f32);
    io::CsvTable meta;
    meta.columns = {"index", "um", "seed", "member", "angle_deg"};
    for (const auto& m : stack.meta)
        meta.rows.push_back({std::to_string(m.index), to_string(stack.kind), std::to_string(m.seed),
                             std::to_string(m.member), io::format_double(m.angle_deg)});
    io::write_csv(dir / (id + ".meta.csv"), meta);
}

SampleStack load_stack(const fs::path& dir, const std::string& id)
{
    SampleStack s;
    const fs::path tensor_path = dir / (id + ".uqt");
    const fs::path meta_path = dir / (id + ".meta.csv");
    s.probs = io::load_uqt(tensor_path);
    const io::CsvTable meta = io::read_csv(meta_path);
    const std::size_t c_um = meta.column("um");
    for (const auto& row : meta.rows) {
        MemberMeta m;
        m.index = io::parse_size(row[meta.column("index")], meta_path.string());
        m.seed = io::parse_size(row[meta.column("seed")], meta_path.string());
        m.member = io::parse_size(row[meta.column("member")], meta_path.string());
        m.angle_deg = io::parse_double(row[meta.column("angle_deg")], meta_path.string());
        try {
            s.kind = parse_um_kind(row[c_um]);
        } catch (const std::exception& e) {
            throw std::runtime_error(meta_path.string() + ": " + e.what());
        }
        s.meta.push_back(m);
    }
    try {
        validate_stack(s);
    } catch (const std::exception& e) {
        throw std::runtime_error(tensor_path.string() + ": " + e.what());
    }
    return s;
}

} // namespace uqseg
