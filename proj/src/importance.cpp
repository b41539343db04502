#include "projprune/importance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "projprune/error.hpp"
#include "projprune/format.hpp"
#include "projprune/projective.hpp"
#include "projprune/rng.hpp"
#include "projprune/stats.hpp"
#include "projprune/training.hpp"

namespace projprune {

const char* criterion_name(Criterion c) {
    switch (c) {
        case Criterion::proscore: return "proscore";
        case Criterion::l1: return "l1";
        case Criterion::l2: return "l2";
        case Criterion::taylor: return "taylor";
        case Criterion::fpgm: return "fpgm";
        case Criterion::random: return "random";
    }
    return "?";
}

Criterion parse_criterion(std::string_view s) {
    for (Criterion c : {Criterion::proscore, Criterion::l1, Criterion::l2, Criterion::taylor, Criterion::fpgm,
                        Criterion::random}) {
        if (s == criterion_name(c)) return c;
    }
    throw ConfigError("unknown criterion '" + std::string(s) + "'");
}

double ImportanceReport::score(const std::string& layer, std::size_t channel) const {
    for (const auto& e : entries)
        if (e.channel == channel && e.layer == layer) return e.score;
    throw ConfigError("report has no entry for " + layer + "[" + std::to_string(channel) + "]");
}

bool ImportanceReport::contains(const std::string& layer, std::size_t channel) const {
    return std::any_of(entries.begin(), entries.end(),
                       [&](const ScoreEntry& e) { return e.channel == channel && e.layer == layer; });
}

std::string ImportanceReport::id() const {
    std::string s = criterion_name(criterion);
    if (criterion == Criterion::proscore) s += "_lambda" + fmt_double(lambda);
    s += "_subset" + fmt_double(subset) + "_seed" + std::to_string(seed);
    return s;
}

std::string report_to_csv(const ImportanceReport& r, std::string_view comment) {
    std::ostringstream os;
    if (!comment.empty()) os << "# " << comment << '\n';
    os << "layer,channel,criterion,lambda,subset,seed,score\n";
    for (const auto& e : r.entries) {
        os << e.layer << ',' << e.channel << ',' << criterion_name(r.criterion) << ',' << fmt_double(r.lambda) << ','
           << fmt_double(r.subset) << ',' << r.seed << ',' << fmt_double(e.score) << '\n';
    }
    return os.str();
}

ImportanceReport report_from_csv(std::string_view text) {
    ImportanceReport r;
    std::istringstream is{std::string(text)};
    std::string line;
    bool header = false, first = true;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != "layer,channel,criterion,lambda,subset,seed,score") throw ParseError("report csv: unexpected header");
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw ParseError("report csv line " + std::to_string(lineno) + ": expected 7 fields");
        if (first) {
            r.criterion = parse_criterion(f[2]);
            r.lambda = parse_double(f[3], "lambda");
            r.subset = parse_double(f[4], "subset");
            r.seed = std::stoull(f[5]);
            first = false;
        }
        r.entries.push_back({f[0], static_cast<std::size_t>(std::stoull(f[1])), parse_double(f[6], "score")});
    }
    if (!header) throw ParseError("report csv: missing header");
    return r;
}

namespace {

ImportanceReport base_report(Criterion c, FilterTarget t) {
    ImportanceReport r;
    r.criterion = c;
    r.target = t;
    return r;
}

Dataset scoring_subset(const Dataset& data, const ScoringOptions& o) {
    if (data.size() == 0) throw ConfigError("scoring: empty dataset");
    if (!(o.subset > 0.0 && o.subset <= 1.0)) throw ConfigError("scoring: subset fraction must be in (0, 1]");
    if (o.subset == 1.0) return data;
    return balanced_subset(data, o.subset, o.seed);
}

std::vector<std::string> target_layers(const std::vector<FilterHandle>& handles) {
    std::vector<std::string> layers;
    for (const auto& h : handles)
        if (layers.empty() || layers.back() != h.layer) layers.push_back(h.layer);
    return layers;
}

}  // namespace

ProscoreGradients accumulate_proscore_gradients(const Model& model, const Dataset& data, const ScoringOptions& o) {
    const Dataset subset = scoring_subset(data, o);
    ProscoreGradients out;
    out.target = o.target;
    out.subset = o.subset;
    out.seed = o.seed;
    out.handles = extract_filters(model, o.target, o.injection.filter);
    if (out.handles.empty()) return out;

    ExtendedModel ext(model, target_layers(out.handles), o.injection);
    AccumulatedGradients acc = accumulate_gradients(ext.model(), subset, o.batch_size, o.threads);
    out.batches = acc.batches;

    std::map<std::string, DGradient> dgrads;
    for (const auto& site : ext.sites()) dgrads.emplace(site.target, ext.d_gradient(site.target, acc.grads));
    const Model original = ext.revert();

    for (const FilterHandle& h : out.handles) {
        out.filters.push_back(gather(original.params(), h));
        out.filter_grads.push_back(gather(acc.grads, h));
        out.d.push_back(l2_norm(out.filters.back()));
        out.d_grads.push_back(dgrads.at(h.layer).d.at(h.channel));
    }
    return out;
}

ImportanceReport proscore_report(const ProscoreGradients& g, double lambda) {
    ImportanceReport r = base_report(Criterion::proscore, g.target);
    r.lambda = lambda;
    r.subset = g.subset;
    r.seed = g.seed;
    for (std::size_t i = 0; i < g.handles.size(); ++i) {
        r.entries.push_back({g.handles[i].layer, g.handles[i].channel,
                             proscore(g.filters[i], g.filter_grads[i], g.d[i], g.d_grads[i], lambda)});
    }
    return r;
}

ImportanceReport score_proscore(const Model& model, const Dataset& data, double lambda, const ScoringOptions& o) {
    if (!(lambda > 0.0)) throw ConfigError("score_proscore: lambda must be > 0");
    return proscore_report(accumulate_proscore_gradients(model, data, o), lambda);
}

ImportanceReport score_l1(const Model& model, FilterTarget target, const FilterOptions& filter) {
    ImportanceReport r = base_report(Criterion::l1, target);
    for (const auto& h : extract_filters(model, target, filter))
        r.entries.push_back({h.layer, h.channel, l1_norm(gather(model.params(), h))});
    return r;
}

ImportanceReport score_l2(const Model& model, FilterTarget target, const FilterOptions& filter) {
    ImportanceReport r = base_report(Criterion::l2, target);
    for (const auto& h : extract_filters(model, target, filter))
        r.entries.push_back({h.layer, h.channel, l2_norm(gather(model.params(), h))});
    return r;
}

ImportanceReport score_taylor(const Model& model, const Dataset& data, const ScoringOptions& o) {
    const Dataset subset = scoring_subset(data, o);
    ImportanceReport r = base_report(Criterion::taylor, o.target);
    r.subset = o.subset;
    r.seed = o.seed;
    Model m = model;
    const AccumulatedGradients acc = accumulate_gradients(m, subset, o.batch_size, o.threads);
    for (const auto& h : extract_filters(model, o.target, o.injection.filter)) {
        r.entries.push_back({h.layer, h.channel, std::abs(dot(gather(model.params(), h), gather(acc.grads, h)))});
    }
    return r;
}

WeiszfeldResult geometric_median(const std::vector<std::vector<double>>& points, double tol, std::size_t max_iter) {
    if (points.empty()) throw ConfigError("geometric_median: no points");
    const std::size_t dim = points[0].size();
    WeiszfeldResult res;
    res.median.assign(dim, 0.0);
    for (const auto& p : points) {
        if (p.size() != dim) throw ShapeError("geometric_median: ragged points");
        for (std::size_t k = 0; k < dim; ++k) res.median[k] += p[k];
    }
    for (double& v : res.median) v /= static_cast<double>(points.size());

    constexpr double kCoincide = 1e-12;
    std::vector<double> next(dim), r(dim);
    for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
        std::fill(next.begin(), next.end(), 0.0);
        std::fill(r.begin(), r.end(), 0.0);
        double wsum = 0.0;
        std::size_t coincident = 0;
        for (const auto& p : points) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < dim; ++k) d2 += (p[k] - res.median[k]) * (p[k] - res.median[k]);
            const double d = std::sqrt(d2);
            if (d < kCoincide) {
                ++coincident;
                continue;
            }
            const double w = 1.0 / d;
            wsum += w;
            for (std::size_t k = 0; k < dim; ++k) {
                next[k] += w * p[k];
                r[k] += w * (p[k] - res.median[k]);
            }
        }
        if (wsum == 0.0) {
            res.converged = true;
            break;
        }
        for (double& v : next) v /= wsum;
        if (coincident > 0) {
            // Vardi-Zhang: stay on the data point when the pull of the others
            // does not exceed its own weight.
            const double rn = l2_norm(r);
            const double eta = static_cast<double>(coincident);
            if (rn <= eta) {
                res.converged = true;
                break;
            }
            const double t = eta / rn;
            for (std::size_t k = 0; k < dim; ++k) next[k] = (1.0 - t) * next[k] + t * res.median[k];
        }
        double step = 0.0;
        for (std::size_t k = 0; k < dim; ++k) step += (next[k] - res.median[k]) * (next[k] - res.median[k]);
        res.median = next;
        if (std::sqrt(step) <= tol) {
            res.converged = true;
            ++res.iterations;
            break;
        }
    }
    return res;
}

ImportanceReport score_fpgm(const Model& model, FilterTarget target, const FilterOptions& filter) {
    ImportanceReport r = base_report(Criterion::fpgm, target);
    const auto handles = extract_filters(model, target, filter);
    for (std::size_t begin = 0; begin < handles.size();) {
        std::size_t end = begin;
        while (end < handles.size() && handles[end].layer == handles[begin].layer) ++end;
        std::vector<std::vector<double>> pts;
        for (std::size_t i = begin; i < end; ++i) pts.push_back(gather(model.params(), handles[i]));
        if (pts.size() < 2) {
            r.entries.push_back({handles[begin].layer, handles[begin].channel, std::numeric_limits<double>::infinity()});
        } else {
            const auto med = geometric_median(pts).median;
            for (std::size_t i = begin; i < end; ++i) {
                double d2 = 0.0;
                const auto& p = pts[i - begin];
                for (std::size_t k = 0; k < p.size(); ++k) d2 += (p[k] - med[k]) * (p[k] - med[k]);
                r.entries.push_back({handles[i].layer, handles[i].channel, std::sqrt(d2)});
            }
        }
        begin = end;
    }
    return r;
}

ImportanceReport score_random(const Model& model, FilterTarget target, std::uint64_t seed) {
    ImportanceReport r = base_report(Criterion::random, target);
    r.seed = seed;
    Rng rng(seed);
    for (const auto& h : extract_filters(model, target)) r.entries.push_back({h.layer, h.channel, rng.uniform()});
    return r;
}

std::vector<double> normalized_scores(const ImportanceReport& report,
                                      const std::vector<std::pair<std::string, std::size_t>>& order) {
    std::map<std::pair<std::string, std::size_t>, double> lookup;
    for (const auto& e : report.entries) lookup[{e.layer, e.channel}] = e.score;
    if (lookup.size() != order.size()) throw ConfigError("correlate: reports cover different channel sets");

    std::vector<double> raw;
    for (const auto& key : order) {
        auto it = lookup.find(key);
        if (it == lookup.end()) {
            throw ConfigError("correlate: channel " + key.first + "[" + std::to_string(key.second) + "] missing from " +
                              report.id());
        }
        raw.push_back(it->second);
    }
    std::vector<double> out(raw.size());
    for (std::size_t b = 0; b < order.size();) {
        std::size_t e = b;
        while (e < order.size() && order[e].first == order[b].first) ++e;
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t i = b; i < e; ++i)
            if (std::isfinite(raw[i])) {
                lo = std::min(lo, raw[i]);
                hi = std::max(hi, raw[i]);
            }
        for (std::size_t i = b; i < e; ++i) {
            if (!std::isfinite(raw[i])) out[i] = 1.0;
            else out[i] = hi > lo ? (raw[i] - lo) / (hi - lo) : 0.0;
        }
        b = e;
    }
    return out;
}

CorrelationMatrix correlate(const std::vector<ImportanceReport>& reports) {
    CorrelationMatrix m;
    if (reports.empty()) return m;
    std::vector<std::pair<std::string, std::size_t>> order;
    for (const auto& e : reports[0].entries) order.emplace_back(e.layer, e.channel);
    std::vector<std::vector<double>> cols;
    for (const auto& r : reports) {
        m.names.push_back(criterion_name(r.criterion));
        cols.push_back(normalized_scores(r, order));
    }
    const std::size_t n = reports.size();
    m.pearson.assign(n, std::vector<double>(n, 1.0));
    m.spearman.assign(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                const bool constant = std::isnan(pearson(cols[i], cols[i]));
                m.pearson[i][j] = constant ? std::numeric_limits<double>::quiet_NaN() : 1.0;
                m.spearman[i][j] = constant ? std::numeric_limits<double>::quiet_NaN() : 1.0;
                continue;
            }
            if (j < i) {
                m.pearson[i][j] = m.pearson[j][i];
                m.spearman[i][j] = m.spearman[j][i];
                continue;
            }
            m.pearson[i][j] = pearson(cols[i], cols[j]);
            m.spearman[i][j] = spearman(cols[i], cols[j]);
        }
    return m;
}

}  // namespace projprune
