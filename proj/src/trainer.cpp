#include "avattr/trainer.hpp"

#include <nlohmann/json.hpp>
#include <fstream>
#include <iostream>

#include "avattr/evalkit.hpp"
#include "avattr/io.hpp"

namespace avattr {

namespace {

void write_flat(const std::filesystem::path& bin, const std::filesystem::path& meta,
                const std::vector<std::string>& names, const std::vector<const Tensor<float>*>& tensors,
                const json& extra) {
    std::ofstream f(bin, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + bin.string());
    json manifest = json::array();
    int64_t offset = 0;
    for (size_t i = 0; i < names.size(); ++i) {
        const Tensor<float>& t = *tensors[i];
        f.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
        manifest.push_back({{"name", names[i]}, {"shape", t.shape}, {"offset_bytes", offset * 4}});
        offset += t.numel();
    }
    json j{{"dtype", "float32"}, {"byte_order", "little"}, {"arrays", manifest}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    io::write_json(meta, j);
}

void read_flat(const std::filesystem::path& bin, const std::filesystem::path& meta,
               const std::function<Tensor<float>*(const std::string&, const Shape&)>& resolve, json* extra_out) {
    json j = io::read_json(meta);
    if (j.value("dtype", "") != "float32") throw std::runtime_error("unsupported checkpoint dtype");
    std::ifstream f(bin, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + bin.string());
    for (const auto& rec : j.at("arrays")) {
        std::string name = rec.at("name").get<std::string>();
        Shape shape = rec.at("shape").get<Shape>();
        Tensor<float>* dst = resolve(name, shape);
        if (!dst) throw std::runtime_error("checkpoint array " + name + " not expected by this model");
        if (dst->shape != shape)
            throw std::runtime_error("checkpoint array " + name + " has shape " + shape_str(shape) +
                                     ", expected " + shape_str(dst->shape));
        f.seekg(rec.at("offset_bytes").get<int64_t>());
        f.read(reinterpret_cast<char*>(dst->ptr()), static_cast<std::streamsize>(dst->numel() * sizeof(float)));
        if (f.gcount() != static_cast<std::streamsize>(dst->numel() * sizeof(float)))
            throw std::runtime_error("truncated checkpoint array " + name);
    }
    if (extra_out) *extra_out = j;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, Model<float>& model,
                     AdamW<float>& opt, const CentroidTable<float>& centroids, int64_t epoch_next,
                     int64_t global_step, double best_val, int64_t best_epoch, const json& metrics_snapshot) {
    std::filesystem::create_directories(dir);
    auto& store = model.store();

    std::vector<std::string> names = store.names();
    std::vector<const Tensor<float>*> tensors;
    for (auto& p : store.params()) tensors.push_back(&p.val());
    write_flat(dir / "weights.bin", dir / "weights.json", names, tensors, {});

    std::vector<std::string> opt_names;
    std::vector<const Tensor<float>*> opt_tensors;
    for (size_t i = 0; i < names.size(); ++i) {
        opt_names.push_back(names[i] + ".m");
        opt_tensors.push_back(&opt.first_moments()[i]);
        opt_names.push_back(names[i] + ".v");
        opt_tensors.push_back(&opt.second_moments()[i]);
    }
    write_flat(dir / "optim.bin", dir / "optim.json", opt_names, opt_tensors, json{{"steps", opt.steps()}});

    write_flat(dir / "centroids.bin", dir / "centroids.json", {"centroids"}, {&centroids.table()},
               json{{"updated_flags", centroids.flags()}});

    io::write_json(dir / "config.json", config.to_json());
    io::write_json(dir / "state.json", json{{"epoch_next", epoch_next},
                                            {"global_step", global_step},
                                            {"best_val_balanced_accuracy", best_val},
                                            {"best_epoch", best_epoch},
                                            {"metrics", metrics_snapshot}});
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, AdamW<float>* opt_out) {
    if (!std::filesystem::exists(dir / "config.json"))
        throw std::runtime_error("no checkpoint at " + dir.string());
    LoadedCheckpoint out;
    out.config = RunConfig::from_json(io::read_json(dir / "config.json"));
    out.model = std::make_shared<Model<float>>(out.config.model, out.config.train.seed);

    auto& store = out.model->store();
    read_flat(dir / "weights.bin", dir / "weights.json",
              [&](const std::string& name, const Shape&) -> Tensor<float>* {
                  return store.has(name) ? &store.by_name(name).val() : nullptr;
              },
              nullptr);

    json cmeta;
    out.centroids = CentroidTable<float>(out.config.model.G + 1, out.config.model.fused_dim());
    read_flat(dir / "centroids.bin", dir / "centroids.json",
              [&](const std::string& name, const Shape&) -> Tensor<float>* {
                  return name == "centroids" ? &out.centroids.table() : nullptr;
              },
              &cmeta);
    out.centroids.flags() = cmeta.at("updated_flags").get<std::vector<uint8_t>>();

    if (opt_out) {
        const auto& names = store.names();
        if (opt_out->first_moments().size() != names.size())
            throw std::runtime_error("optimizer state size mismatch");
        // moments must exist at the right shapes before the raw load
        for (size_t i = 0; i < names.size(); ++i) {
            opt_out->first_moments()[i] = Tensor<float>::zeros(store.params()[i].val().shape);
            opt_out->second_moments()[i] = Tensor<float>::zeros(store.params()[i].val().shape);
        }
        json ometa;
        read_flat(dir / "optim.bin", dir / "optim.json",
                  [&](const std::string& name, const Shape&) -> Tensor<float>* {
                      if (name.size() > 2 && name.ends_with(".m")) {
                          std::string base = name.substr(0, name.size() - 2);
                          for (size_t i = 0; i < names.size(); ++i)
                              if (names[i] == base) return &opt_out->first_moments()[i];
                      }
                      if (name.size() > 2 && name.ends_with(".v")) {
                          std::string base = name.substr(0, name.size() - 2);
                          for (size_t i = 0; i < names.size(); ++i)
                              if (names[i] == base) return &opt_out->second_moments()[i];
                      }
                      return nullptr;
                  },
                  &ometa);
        opt_out->set_steps(ometa.at("steps").get<int64_t>());
    }

    json state = io::read_json(dir / "state.json");
    out.epoch_next = state.at("epoch_next").get<int64_t>();
    out.global_step = state.at("global_step").get<int64_t>();
    out.best_val = state.at("best_val_balanced_accuracy").get<double>();
    out.best_epoch = state.at("best_epoch").get<int64_t>();
    return out;
}

namespace {

struct StepRecord {
    int64_t step, epoch;
    double lr;
    LossBreakdown<float> loss;
    bool epoch_summary = false;

    json to_json() const {
        json j{{"step", step},         {"epoch", epoch},       {"lr", lr},
               {"det", loss.det},      {"attr", loss.attr},    {"cont", loss.cont},
               {"fp", loss.fp},        {"cen", loss.cen},      {"total", loss.total}};
        if (epoch_summary) j["epoch_summary"] = true;
        return j;
    }
};

// assemble a training batch from sampler draws; lenient loading may shrink it
BatchInput<float> make_batch(const SampleLoader& loader, const DatasetManifest& manifest,
                             const std::vector<size_t>& entry_ids, uint64_t seed, int64_t epoch,
                             size_t first_pos, size_t count, bool augment, bool strict,
                             const NetConfig<float>& cfg) {
    std::vector<Sample> loaded;
    for (size_t k = 0; k < count; ++k) {
        Rng rng = Rng::stream(seed, "augment", static_cast<uint64_t>(epoch),
                              static_cast<uint64_t>(first_pos + k));
        auto s = loader.load(manifest.entries[entry_ids[first_pos + k]], augment, rng, strict);
        if (s) loaded.push_back(std::move(*s));
    }
    BatchInput<float> batch;
    const int64_t B = static_cast<int64_t>(loaded.size());
    batch.frames = Tensor<float>({B * cfg.T, 3, cfg.image_size, cfg.image_size});
    batch.mel = Tensor<float>({B, 1, 128, 128});
    for (int64_t b = 0; b < B; ++b) {
        std::copy_n(loaded[static_cast<size_t>(b)].frames.ptr(), loaded[static_cast<size_t>(b)].frames.numel(),
                    batch.frames.ptr() + b * loaded[static_cast<size_t>(b)].frames.numel());
        std::copy_n(loaded[static_cast<size_t>(b)].mel.ptr(), loaded[static_cast<size_t>(b)].mel.numel(),
                    batch.mel.ptr() + b * loaded[static_cast<size_t>(b)].mel.numel());
        batch.y.push_back(loaded[static_cast<size_t>(b)].y);
        batch.g.push_back(loaded[static_cast<size_t>(b)].g);
        batch.ids.push_back(loaded[static_cast<size_t>(b)].source_id);
    }
    return batch;
}

}  // namespace

TrainResult train(const DatasetManifest& manifest, const RunConfig& config,
                  const std::filesystem::path& out_dir, const std::filesystem::path& resume_from) {
    RunConfig cfg = config;
    cfg.model.G = manifest.num_generators();
    if (cfg.model.G < 1) throw std::runtime_error("train: manifest has no fake generator classes");
    cfg.validate();

    auto train_ids = manifest.split_indices("train");
    if (train_ids.empty()) throw std::runtime_error("train: empty train split");

    std::filesystem::create_directories(out_dir);
    const AblateSet ablate = AblateSet::parse(cfg.ablate);
    const LossWeights<float> weights = ablate.apply(cfg.loss);
    const uint64_t seed = cfg.train.seed;
    const int64_t E = cfg.train.epochs;
    const int64_t B = cfg.train.batch_size;

    std::shared_ptr<Model<float>> model;
    CentroidTable<float> centroids;
    AdamW<float> opt;
    int64_t start_epoch = 0, global_step = 0, best_epoch = -1;
    double best_val = -1.0;

    if (!resume_from.empty()) {
        // model geometry and parameter shapes must match the checkpoint
        LoadedCheckpoint ck = load_checkpoint(resume_from, nullptr);
        model = ck.model;
        opt = AdamW<float>(static_cast<int64_t>(model->store().params().size()),
                           static_cast<float>(cfg.train.weight_decay));
        LoadedCheckpoint again = load_checkpoint(resume_from, &opt);
        model = again.model;
        centroids = again.centroids;
        start_epoch = again.epoch_next;
        global_step = again.global_step;
        best_val = again.best_val;
        best_epoch = again.best_epoch;
    } else {
        model = std::make_shared<Model<float>>(cfg.model, seed);
        centroids = CentroidTable<float>(cfg.model.G + 1, cfg.model.fused_dim());  // zero-initialized
        opt = AdamW<float>(static_cast<int64_t>(model->store().params().size()),
                           static_cast<float>(cfg.train.weight_decay));
    }

    SampleLoader loader(cfg.data, manifest.root);
    auto& params = model->store().params();

    TrainResult result;
    result.train_log = out_dir / "train_log.jsonl";
    result.val_log = out_dir / "val_log.jsonl";
    result.checkpoint_last = out_dir / "ckpt_last";
    result.checkpoint_best = out_dir / "ckpt_best";
    std::ofstream train_log(result.train_log, std::ios::app);
    std::ofstream val_log(result.val_log, std::ios::app);

    const auto sample_weights = sampler_weights(manifest, "train");
    const auto cdf = Rng::cumulative(sample_weights);

    save_checkpoint(result.checkpoint_last, cfg, *model, opt, centroids, start_epoch, global_step, best_val,
                    best_epoch, json::object());

    for (int64_t epoch = start_epoch; epoch < E; ++epoch) {
        const double lr = cosine_lr(cfg.train.learning_rate, epoch, E);
        // one weighted-with-replacement pass over the train split per epoch
        Rng order_rng = Rng::stream(seed, "sampler", static_cast<uint64_t>(epoch));
        std::vector<size_t> order(train_ids.size());
        for (auto& o : order) o = train_ids[static_cast<size_t>(order_rng.discrete(cdf))];

        LossBreakdown<double> epoch_sum{};
        int64_t epoch_steps = 0;

        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(B)) {
            const size_t count = std::min(order.size() - pos, static_cast<size_t>(B));
            BatchInput<float> batch =
                make_batch(loader, manifest, order, seed, epoch, pos, count, /*augment=*/true,
                           /*strict=*/false, cfg.model);
            if (batch.batch_size() == 0) continue;  // every sample in the batch failed to load

            Rng dropout_rng = Rng::stream(seed, "dropout", static_cast<uint64_t>(global_step));
            LossBundle<float> losses;
            try {
                auto out = model->forward(batch, /*train=*/true, &dropout_rng, ablate.cma_module);

                Var<float> det = focal_loss(out.detect_prob, batch.y, weights.alpha, weights.gamma,
                                            weights.alpha_on_fake);
                Var<float> attr = attribution_ce(out.attr_probs, batch.g);
                Var<float> cont;
                if (weights.cont_exclude_fakes) {
                    std::vector<int64_t> real_rows;
                    for (size_t i = 0; i < batch.y.size(); ++i)
                        if (batch.y[i] == 0) real_rows.push_back(static_cast<int64_t>(i));
                    if (real_rows.size() < 2) {
                        cont = Var<float>(Tensor<float>({1}, std::vector<float>{0.0f}));
                    } else {
                        cont = info_nce(gather_rows(out.p_v, real_rows), gather_rows(out.p_a, real_rows),
                                        weights.tau);
                    }
                } else {
                    cont = info_nce(out.p_v, out.p_a, weights.tau);
                }
                int fp_groups = 0;
                Var<float> fp = cmffc_loss(out.p_v, out.p_a, batch.g, weights.tau, &fp_groups);
                if (fp_groups == 0) ++result.fp_empty_batches;
                Var<float> cen =
                    centroid_loss(out.z_f, batch.g, centroids, weights.defer_centroid_loss);

                losses = total_loss(det, attr, cont, fp, cen, weights, fp_groups);

                backward(losses.total);
                clip_gradients(params, static_cast<float>(cfg.train.clip_norm));
                opt.step(params, static_cast<float>(lr));
                opt.zero_grad(params);
                centroids.update(out.z_f.val(), batch.g, weights.centroid_momentum);
            } catch (const std::runtime_error& e) {
                std::cerr << "[train] aborting at step " << global_step << ": " << e.what()
                          << " (last good checkpoint: " << result.checkpoint_last.string() << ")\n";
                result.aborted = true;
                result.epochs_run = epoch - start_epoch;
                result.best_val_balanced_accuracy = best_val;
                return result;
            }

            auto vals = losses.values();
            // the composition identity is part of the training contract
            double recompose = static_cast<double>(vals.det) + weights.lambda_attr * vals.attr +
                               weights.lambda_cont * vals.cont + weights.lambda_fp * vals.fp +
                               weights.lambda_cen * vals.cen;
            if (std::abs(recompose - static_cast<double>(vals.total)) >
                1e-6 * std::max(1.0, std::abs(recompose)))
                throw std::logic_error("loss composition identity violated");

            StepRecord rec{global_step, epoch, lr, vals, false};
            train_log << rec.to_json().dump() << "\n";
            epoch_sum.det += vals.det;
            epoch_sum.attr += vals.attr;
            epoch_sum.cont += vals.cont;
            epoch_sum.fp += vals.fp;
            epoch_sum.cen += vals.cen;
            epoch_sum.total += vals.total;
            ++epoch_steps;
            ++global_step;
        }

        StepRecord summary{global_step, epoch, lr,
                           LossBreakdown<float>{
                               static_cast<float>(epoch_sum.det / epoch_steps),
                               static_cast<float>(epoch_sum.attr / epoch_steps),
                               static_cast<float>(epoch_sum.cont / epoch_steps),
                               static_cast<float>(epoch_sum.fp / epoch_steps),
                               static_cast<float>(epoch_sum.cen / epoch_steps),
                               static_cast<float>(epoch_sum.total / epoch_steps)},
                           true};
        train_log << summary.to_json().dump() << "\n";
        train_log.flush();

        json metrics_snapshot = json::object();
        const bool validate_now =
            ((epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == E) && !manifest.split_indices("val").empty();
        if (validate_now) {
            EvalRun val = run_inference(*model, loader, manifest, "val", B, cfg.eval.threshold,
                                        /*keep_embeddings=*/false, ablate.cma_module);
            metrics_snapshot = val.report.to_json();
            json vrec = val.report.to_json();
            vrec["epoch"] = epoch;
            val_log << vrec.dump() << "\n";
            val_log.flush();
            if (val.report.balanced_accuracy > best_val) {
                best_val = val.report.balanced_accuracy;
                best_epoch = epoch;
                save_checkpoint(result.checkpoint_best, cfg, *model, opt, centroids, epoch + 1, global_step,
                                best_val, best_epoch, metrics_snapshot);
            }
        }
        save_checkpoint(result.checkpoint_last, cfg, *model, opt, centroids, epoch + 1, global_step, best_val,
                        best_epoch, metrics_snapshot);
        result.epochs_run = epoch - start_epoch + 1;
    }

    if (best_epoch < 0) result.checkpoint_best = result.checkpoint_last;
    result.best_val_balanced_accuracy = best_val;
    return result;
}

}  // namespace avattr

