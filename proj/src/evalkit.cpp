#include "avattr/evalkit.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "avattr/io.hpp"
#include "avattr/trainer.hpp"

namespace avattr {

// ------------------------------------------------------------------- AUC

std::optional<double> auc_score(const std::vector<double>& scores_real, const std::vector<double>& scores_fake) {
    if (scores_real.empty() || scores_fake.empty()) return std::nullopt;
    struct Item {
        double v;
        int fake;
    };
    std::vector<Item> all;
    all.reserve(scores_real.size() + scores_fake.size());
    for (double v : scores_real) all.push_back({v, 0});
    for (double v : scores_fake) all.push_back({v, 1});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });

    // tie groups share the average rank; twice the rank stays integral
    const int64_t n = static_cast<int64_t>(all.size());
    int64_t rank2_sum_fake = 0;
    int64_t i = 0;
    while (i < n) {
        int64_t j = i;
        while (j < n && all[static_cast<size_t>(j)].v == all[static_cast<size_t>(i)].v) ++j;
        int64_t rank2 = (i + 1) + j;  // lo + hi of 1-based ranks
        for (int64_t k = i; k < j; ++k)
            if (all[static_cast<size_t>(k)].fake) rank2_sum_fake += rank2;
        i = j;
    }
    const int64_t nf = static_cast<int64_t>(scores_fake.size());
    const int64_t nr = static_cast<int64_t>(scores_real.size());
    // U (doubled) = 2*R_f - nf(nf+1)
    const int64_t u2 = rank2_sum_fake - nf * (nf + 1);
    return static_cast<double>(u2) / (2.0 * static_cast<double>(nf) * static_cast<double>(nr));
}

// ---------------------------------------------------------------- metrics

MetricsReport metrics_from_predictions(const std::vector<int>& y, const std::vector<int>& g,
                                       const std::vector<double>& probs, const std::vector<int>& attr_pred,
                                       double threshold, int num_classes) {
    const size_t n = y.size();
    if (g.size() != n || probs.size() != n || attr_pred.size() != n)
        throw std::invalid_argument("metrics_from_predictions: length mismatch");

    MetricsReport r;
    r.threshold = threshold;
    r.n = static_cast<int64_t>(n);
    r.attr_confusion.assign(static_cast<size_t>(num_classes),
                            std::vector<int64_t>(static_cast<size_t>(num_classes), 0));

    std::map<int, std::pair<int64_t, int64_t>> per_gen;  // g -> (correct, total)
    std::vector<double> scores_real, scores_fake;
    for (size_t i = 0; i < n; ++i) {
        int pred = probs[i] >= threshold ? 1 : 0;
        r.detect_confusion[static_cast<size_t>(y[i])][static_cast<size_t>(pred)]++;
        r.attr_confusion[static_cast<size_t>(g[i])][static_cast<size_t>(attr_pred[i])]++;
        auto& pg = per_gen[g[i]];
        pg.second++;
        if (pred == y[i]) pg.first++;
        (y[i] == 1 ? scores_fake : scores_real).push_back(probs[i]);
    }

    const int64_t tn = r.detect_confusion[0][0], fp = r.detect_confusion[0][1];
    const int64_t fn = r.detect_confusion[1][0], tp = r.detect_confusion[1][1];
    r.real_accuracy = (tn + fp) > 0 ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 0.0;
    r.fake_accuracy = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.balanced_accuracy = (r.real_accuracy + r.fake_accuracy) / 2.0;

    const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = r.fake_accuracy;
    r.f1 = (precision + recall) > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;

    int64_t attr_correct = 0;
    for (int c = 0; c < num_classes; ++c) attr_correct += r.attr_confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
    r.attribution_accuracy = n > 0 ? static_cast<double>(attr_correct) / static_cast<double>(n) : 0.0;

    for (const auto& [cls, ct] : per_gen)
        r.per_generator_detection[cls] = static_cast<double>(ct.first) / static_cast<double>(ct.second);

    r.auc = auc_score(scores_real, scores_fake);
    if (!r.auc)
        r.auc_note = scores_real.empty() ? "no real samples in split; AUC undefined"
                                         : "no fake samples in split; AUC undefined";
    return r;
}

json MetricsReport::to_json() const {
    json j;
    j["n"] = n;
    j["threshold"] = threshold;
    j["balanced_accuracy"] = balanced_accuracy;
    if (auc)
        j["auc"] = *auc;
    else
        j["auc_note"] = auc_note;
    j["f1"] = f1;
    j["real_accuracy"] = real_accuracy;
    j["fake_accuracy"] = fake_accuracy;
    j["attribution_accuracy"] = attribution_accuracy;
    j["detect_confusion"] = {{detect_confusion[0][0], detect_confusion[0][1]},
                             {detect_confusion[1][0], detect_confusion[1][1]}};
    j["attr_confusion"] = attr_confusion;
    json pg = json::object();
    for (const auto& [cls, acc] : per_generator_detection) pg[std::to_string(cls)] = acc;
    j["per_generator_detection"] = pg;
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    r.n = j.at("n").get<int64_t>();
    r.threshold = j.at("threshold").get<double>();
    r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
    if (j.contains("auc")) r.auc = j.at("auc").get<double>();
    if (j.contains("auc_note")) r.auc_note = j.at("auc_note").get<std::string>();
    r.f1 = j.at("f1").get<double>();
    r.real_accuracy = j.at("real_accuracy").get<double>();
    r.fake_accuracy = j.at("fake_accuracy").get<double>();
    r.attribution_accuracy = j.at("attribution_accuracy").get<double>();
    auto dc = j.at("detect_confusion");
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            r.detect_confusion[static_cast<size_t>(a)][static_cast<size_t>(b)] = dc.at(a).at(b).get<int64_t>();
    r.attr_confusion = j.at("attr_confusion").get<std::vector<std::vector<int64_t>>>();
    if (j.contains("per_generator_detection")) {
        const json& pg = j.at("per_generator_detection");
        for (const auto& [k, v] : pg.items()) r.per_generator_detection[std::stoi(k)] = v.get<double>();
    }
    return r;
}

void MetricsReport::save(const std::filesystem::path& path) const { io::write_json(path, to_json()); }
MetricsReport MetricsReport::load(const std::filesystem::path& path) { return from_json(io::read_json(path)); }

// -------------------------------------------------------------- inference

EvalRun run_inference(const Model<float>& model, const SampleLoader& loader, const DatasetManifest& manifest,
                      const std::string& split, int64_t batch_size, double threshold, bool keep_embeddings,
                      bool bypass_cross_attention) {
    auto idx = manifest.split_indices(split);
    if (idx.empty()) throw std::runtime_error("evaluate: split " + split + " is empty");

    const auto& cfg = model.config();
    EvalRun run;
    std::vector<int> y, g, attr_pred;
    std::vector<double> probs;

    for (size_t pos = 0; pos < idx.size(); pos += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(idx.size(), pos + static_cast<size_t>(batch_size));
        const int64_t B = static_cast<int64_t>(end - pos);
        BatchInput<float> batch;
        batch.frames = Tensor<float>({B * cfg.T, 3, cfg.image_size, cfg.image_size});
        batch.mel = Tensor<float>({B, 1, 128, 128});
        for (size_t k = pos; k < end; ++k) {
            auto s = loader.load(manifest.entries[idx[k]], false, Rng(0), /*strict=*/true);
            const int64_t b = static_cast<int64_t>(k - pos);
            std::copy_n(s->frames.ptr(), s->frames.numel(), batch.frames.ptr() + b * s->frames.numel());
            std::copy_n(s->mel.ptr(), s->mel.numel(), batch.mel.ptr() + b * s->mel.numel());
            batch.y.push_back(s->y);
            batch.g.push_back(s->g);
            batch.ids.push_back(s->source_id);
        }

        NoGrad ng;
        auto out = model.forward(batch, /*train=*/false, nullptr, bypass_cross_attention);
        for (int64_t b = 0; b < B; ++b) {
            SampleEval se;
            se.id = batch.ids[static_cast<size_t>(b)];
            se.y = batch.y[static_cast<size_t>(b)];
            se.g = batch.g[static_cast<size_t>(b)];
            se.prob = out.detect_prob.val()[b];
            int best = 0;
            for (int c = 1; c <= cfg.G; ++c)
                if (out.attr_probs.val().at(b, c) > out.attr_probs.val().at(b, best)) best = c;
            se.attr_pred = best;
            double dot = 0.0;
            for (int64_t j = 0; j < cfg.proj_dim_resolved(); ++j)
                dot += static_cast<double>(out.p_v.val().at(b, j)) * static_cast<double>(out.p_a.val().at(b, j));
            se.cos_va = dot;
            if (keep_embeddings) {
                auto take = [&](const Var<float>& v, std::vector<float>& dst) {
                    const int64_t w = v.val().dim(1);
                    dst.assign(v.val().ptr() + b * w, v.val().ptr() + (b + 1) * w);
                };
                take(out.z_v, se.z_v);
                take(out.z_a, se.z_a);
                take(out.z_f, se.z_f);
                take(out.p_v, se.p_v);
                take(out.p_a, se.p_a);
            }
            y.push_back(se.y);
            g.push_back(se.g);
            probs.push_back(se.prob);
            attr_pred.push_back(se.attr_pred);
            run.samples.push_back(std::move(se));
        }
    }

    run.report = metrics_from_predictions(y, g, probs, attr_pred, threshold, static_cast<int>(cfg.G) + 1);

    std::map<int, std::vector<double>> by_gen;
    for (const auto& s : run.samples) by_gen[s.g].push_back(s.cos_va);
    for (const auto& [cls, vals] : by_gen) {
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size());
        run.similarity[cls] = {mean, std::sqrt(var)};
    }
    return run;
}

EvalRun evaluate_checkpoint(const std::filesystem::path& checkpoint_dir, const DatasetManifest& manifest,
                            const std::string& split, double threshold, bool keep_embeddings) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_dir);
    DataConfig data = ckpt.config.data;
    SampleLoader loader(data, manifest.root);
    AblateSet ablate = AblateSet::parse(ckpt.config.ablate);
    return run_inference(*ckpt.model, loader, manifest, split, ckpt.config.train.batch_size, threshold,
                         keep_embeddings, ablate.cma_module);
}

// ----------------------------------------------------------------- export

void export_embeddings(const std::filesystem::path& checkpoint_dir, const DatasetManifest& manifest,
                       const std::string& which, const std::string& split,
                       const std::filesystem::path& out_path) {
    static const std::set<std::string> kKnown{"z_v", "z_a", "z_f", "p_v", "p_a"};
    if (!kKnown.count(which))
        throw std::invalid_argument("unknown representation tag " + which +
                                    " (expected z_v, z_a, z_f, p_v or p_a)");
    EvalRun run = evaluate_checkpoint(checkpoint_dir, manifest, split, 0.5, /*keep_embeddings=*/true);

    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write " + out_path.string());
    const auto& first = run.samples.front();
    const std::vector<float>* sel = &first.z_f;
    auto pick = [&](const SampleEval& s) -> const std::vector<float>* {
        if (which == "z_v") return &s.z_v;
        if (which == "z_a") return &s.z_a;
        if (which == "z_f") return &s.z_f;
        if (which == "p_v") return &s.p_v;
        return &s.p_a;
    };
    sel = pick(first);
    f << "source_id\ty\tg";
    for (size_t j = 0; j < sel->size(); ++j) f << "\tv" << j;
    f << "\n";
    char buf[32];
    for (const auto& s : run.samples) {
        f << s.id << "\t" << s.y << "\t" << s.g;
        for (float v : *pick(s)) {
            std::snprintf(buf, sizeof buf, "%.6g", static_cast<double>(v));
            f << "\t" << buf;
        }
        f << "\n";
    }
}

void write_scores_tsv(const EvalRun& run, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "source_id\ty\tg\tprob\tattr_pred\n";
    char buf[32];
    for (const auto& s : run.samples) {
        std::snprintf(buf, sizeof buf, "%.6g", s.prob);
        f << s.id << "\t" << s.y << "\t" << s.g << "\t" << buf << "\t" << s.attr_pred << "\n";
    }
}

void write_similarity_tsv(const EvalRun& run, const std::map<int, std::string>& names,
                          const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "g\tname\tcount\tmean_cos\tstddev_cos\n";
    for (const auto& [cls, stats] : run.similarity) {
        int64_t count = 0;
        for (const auto& s : run.samples)
            if (s.g == cls) ++count;
        auto it = names.find(cls);
        f << cls << "\t" << (it != names.end() ? it->second : "g" + std::to_string(cls)) << "\t" << count << "\t"
          << stats.first << "\t" << stats.second << "\n";
    }
}

std::string compare_ablations(const std::vector<std::pair<std::string, MetricsReport>>& reports) {
    if (reports.size() < 2) throw std::invalid_argument("compare_ablations: need at least two reports");
    std::ostringstream os;
    auto pct = [](double v) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%6.1f", 100.0 * v);
        return std::string(buf);
    };
    size_t name_w = 12;
    for (const auto& [name, _] : reports) name_w = std::max(name_w, name.size());
    os << std::string(name_w, ' ') << "  Bal.Acc     AUC      F1    Real    Fake   Attr.\n";
    for (const auto& [name, r] : reports) {
        os << name << std::string(name_w - name.size(), ' ') << "  " << pct(r.balanced_accuracy) << "  "
           << (r.auc ? pct(*r.auc) : "    --") << "  " << pct(r.f1) << "  " << pct(r.real_accuracy) << "  "
           << pct(r.fake_accuracy) << "  " << pct(r.attribution_accuracy) << "\n";
    }
    return os.str();
}

}  // namespace avattr

