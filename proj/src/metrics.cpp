#include "msfseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "msfseg/errors.hpp"

namespace msf {

namespace {

void same_shape(const Mask2D& a, const Mask2D& b, const char* op) {
    if (a.h != b.h || a.w != b.w)
        throw InputError(std::string(op) + ": shape mismatch " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                         " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
}

struct Counts {
    std::size_t inter = 0, a = 0, b = 0;
};

Counts count(const Mask2D& a, const Mask2D& b) {
    Counts c;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
        c.inter += x && y;
        c.a += x;
        c.b += y;
    }
    return c;
}

double dice_of(const Counts& c) {
    if (c.a + c.b == 0) return 1.0;
    return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b);
}

double jaccard_of(const Counts& c) {
    const std::size_t uni = c.a + c.b - c.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.inter) / static_cast<double>(uni);
}

// Disk dilation with radius tol.
Mask2D dilate(const Mask2D& m, int tol) {
    if (tol <= 0) return m;
    Mask2D out(m.h, m.w);
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -tol; dy <= tol; ++dy)
        for (int dx = -tol; dx <= tol; ++dx)
            if (dy * dy + dx * dx <= tol * tol) offsets.emplace_back(dy, dx);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            for (auto [dy, dx] : offsets) {
                const int yy = y + dy, xx = x + dx;
                if (yy >= 0 && xx >= 0 && yy < m.h && xx < m.w) out.at(yy, xx) = 1;
            }
        }
    return out;
}

void check_stack(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt, const char* op) {
    if (pred.size() != gt.size())
        throw InputError(std::string(op) + ": " + std::to_string(pred.size()) + " predicted slices vs " +
                         std::to_string(gt.size()) + " ground-truth slices");
    for (std::size_t z = 0; z < pred.size(); ++z) same_shape(pred[z], gt[z], op);
}

Counts count_stack(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt) {
    Counts total;
    for (std::size_t z = 0; z < pred.size(); ++z) {
        const Counts c = count(pred[z], gt[z]);
        total.inter += c.inter;
        total.a += c.a;
        total.b += c.b;
    }
    return total;
}

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

MetricRow mean_of(const std::vector<const MetricRow*>& rows, std::string volume, int class_id) {
    MetricRow m{std::move(volume), class_id};
    if (rows.empty()) return m;
    for (const MetricRow* r : rows) {
        m.dice += r->dice;
        m.j += r->j;
        m.f += r->f;
    }
    const double n = static_cast<double>(rows.size());
    m.dice /= n;
    m.j /= n;
    m.f /= n;
    m.jf = (m.j + m.f) / 2.0;
    return m;
}

}  // namespace

double dice(const Mask2D& pred, const Mask2D& gt) {
    same_shape(pred, gt, "dice");
    return dice_of(count(pred, gt));
}

double jaccard(const Mask2D& pred, const Mask2D& gt) {
    same_shape(pred, gt, "jaccard");
    return jaccard_of(count(pred, gt));
}

Mask2D boundary(const Mask2D& m) {
    Mask2D out(m.h, m.w);
    auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < m.h && x < m.w && m.at(y, x) != 0; };
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.at(y, x) = 1;
    return out;
}

double boundary_f(const Mask2D& pred, const Mask2D& gt, int tol) {
    same_shape(pred, gt, "boundary_f");
    if (tol < 0) throw InputError("boundary_f: tolerance must be >= 0");
    const Mask2D bp = boundary(pred), bg = boundary(gt);
    const std::size_t np = bp.area(), ng = bg.area();
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const double precision = static_cast<double>(count(bp, dilate(bg, tol)).inter) / static_cast<double>(np);
    const double recall = static_cast<double>(count(bg, dilate(bp, tol)).inter) / static_cast<double>(ng);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

int default_boundary_tolerance(int h, int w) {
    return static_cast<int>(std::ceil(0.008 * std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w)));
}

double volume_dice(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt) {
    check_stack(pred, gt, "volume_dice");
    return dice_of(count_stack(pred, gt));
}

double volume_jaccard(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt) {
    check_stack(pred, gt, "volume_jaccard");
    return jaccard_of(count_stack(pred, gt));
}

double mean_slice_f(const std::vector<Mask2D>& pred, const std::vector<Mask2D>& gt, int tol) {
    check_stack(pred, gt, "mean_slice_f");
    double total = 0.0;
    int used = 0;
    for (std::size_t z = 0; z < pred.size(); ++z) {
        if (pred[z].area() == 0 && gt[z].area() == 0) continue;
        const int t = tol < 0 ? default_boundary_tolerance(gt[z].h, gt[z].w) : tol;
        total += boundary_f(pred[z], gt[z], t);
        ++used;
    }
    return used ? total / used : 1.0;
}

std::vector<MetricRow> MetricReport::aggregates() const {
    std::map<int, std::vector<const MetricRow*>> by_class;
    std::vector<const MetricRow*> all;
    for (const auto& r : rows) {
        by_class[r.class_id].push_back(&r);
        all.push_back(&r);
    }
    std::vector<MetricRow> out;
    for (const auto& [cls, members] : by_class) out.push_back(mean_of(members, "*", cls));
    out.push_back(mean_of(all, "*", 0));
    return out;
}

MetricRow MetricReport::mean() const { return aggregates().back(); }

std::string MetricReport::to_tsv() const {
    std::ostringstream os;
    os << "# protocol\t" << protocol << "\n# seeds\t";
    for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    os << "\nvolume\tclass\tdice\tj\tf\tjf\n";
    auto line = [&os](const MetricRow& r) {
        os << r.volume << '\t' << r.class_id << '\t' << fixed(r.dice) << '\t' << fixed(r.j) << '\t' << fixed(r.f)
           << '\t' << fixed(r.jf) << '\n';
    };
    for (const auto& r : rows) line(r);
    for (const auto& r : aggregates()) line(r);
    return os.str();
}

std::string MetricReport::to_json() const {
    auto row_json = [](const MetricRow& r) {
        nlohmann::ordered_json j;
        j["volume"] = r.volume;
        j["class"] = r.class_id;
        j["dice"] = r.dice;
        j["j"] = r.j;
        j["f"] = r.f;
        j["jf"] = r.jf;
        return j;
    };
    nlohmann::ordered_json j;
    j["protocol"] = protocol;
    j["seeds"] = seeds;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) j["rows"].push_back(row_json(r));
    j["aggregates"] = nlohmann::ordered_json::array();
    for (const auto& r : aggregates()) j["aggregates"].push_back(row_json(r));
    return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
    MetricReport rep;
    try {
        const auto j = nlohmann::json::parse(text);
        rep.protocol = j.at("protocol").get<std::string>();
        rep.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        for (const auto& r : j.at("rows"))
            rep.rows.push_back({r.at("volume").get<std::string>(), r.at("class").get<int>(), r.at("dice").get<double>(),
                                r.at("j").get<double>(), r.at("f").get<double>(), r.at("jf").get<double>()});
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("metric report: ") + e.what());
    }
    return rep;
}

MetricReport evaluate_run(const std::vector<VolumePrediction>& volumes, const std::string& protocol,
                          std::uint64_t seed, int tol) {
    std::vector<std::string> offenders;
    for (const auto& v : volumes) {
        bool ok = v.pred.size() == v.gt.size();
        for (std::size_t z = 0; ok && z < v.pred.size(); ++z) ok = v.pred[z].h == v.gt[z].h && v.pred[z].w == v.gt[z].w;
        if (!ok) offenders.push_back(v.volume);
    }
    if (!offenders.empty()) {
        std::string msg = "evaluate: misaligned prediction/ground truth for";
        for (const auto& o : offenders) msg += " " + o;
        throw InputError(msg);
    }
    MetricReport rep;
    rep.protocol = protocol;
    rep.seeds = {seed};
    for (const auto& v : volumes) {
        MetricRow r{v.volume, v.class_id};
        r.dice = volume_dice(v.pred, v.gt);
        r.j = volume_jaccard(v.pred, v.gt);
        r.f = mean_slice_f(v.pred, v.gt, tol);
        r.jf = (r.j + r.f) / 2.0;
        rep.rows.push_back(std::move(r));
    }
    std::sort(rep.rows.begin(), rep.rows.end(), [](const MetricRow& a, const MetricRow& b) {
        return a.class_id != b.class_id ? a.class_id < b.class_id : a.volume < b.volume;
    });
    return rep;
}

MetricReport average_reports(const std::vector<MetricReport>& runs) {
    if (runs.empty()) throw InputError("evaluate: no runs to average");
    MetricReport out;
    out.protocol = runs[0].protocol;
    std::vector<std::string> offenders;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        if (runs[k].rows.size() != runs[0].rows.size()) offenders.push_back("run" + std::to_string(k));
        else
            for (std::size_t i = 0; i < runs[k].rows.size(); ++i)
                if (runs[k].rows[i].volume != runs[0].rows[i].volume ||
                    runs[k].rows[i].class_id != runs[0].rows[i].class_id) {
                    offenders.push_back("run" + std::to_string(k) + ":" + runs[k].rows[i].volume);
                    break;
                }
        out.seeds.insert(out.seeds.end(), runs[k].seeds.begin(), runs[k].seeds.end());
    }
    if (!offenders.empty()) {
        std::string msg = "evaluate: runs cover different volumes:";
        for (const auto& o : offenders) msg += " " + o;
        throw InputError(msg);
    }
    for (std::size_t i = 0; i < runs[0].rows.size(); ++i) {
        std::vector<const MetricRow*> column;
        for (const auto& r : runs) column.push_back(&r.rows[i]);
        out.rows.push_back(mean_of(column, runs[0].rows[i].volume, runs[0].rows[i].class_id));
    }
    return out;
}

}  // namespace msf
