#include "avattr/config.hpp"

#include <nlohmann/json.hpp>
#include <set>

#include "avattr/io.hpp"

namespace avattr {

void TrainSettings::validate() const {
    if (learning_rate <= 0 || weight_decay < 0 || epochs <= 0 || batch_size <= 0 || clip_norm <= 0 ||
        eval_every <= 0)
        throw ConfigError("train settings must be positive");
}

AblateSet AblateSet::parse(const std::vector<std::string>& flags) {
    AblateSet s;
    for (const auto& f : flags) {
        if (f == "attr")
            s.attr = true;
        else if (f == "cont")
            s.cont = true;
        else if (f == "fp")
            s.fp = true;
        else if (f == "cen")
            s.cen = true;
        else if (f == "cma_module")
            s.cma_module = true;
        else
            throw ConfigError("unknown ablate flag: " + f +
                              " (expected attr, cont, fp, cen or cma_module)");
    }
    return s;
}

LossWeights<float> AblateSet::apply(LossWeights<float> w) const {
    if (attr) w.lambda_attr = 0.0f;
    if (cont) w.lambda_cont = 0.0f;
    if (fp) w.lambda_fp = 0.0f;
    if (cen) w.lambda_cen = 0.0f;
    return w;
}

std::vector<std::string> AblateSet::to_list() const {
    std::vector<std::string> out;
    if (attr) out.push_back("attr");
    if (cont) out.push_back("cont");
    if (fp) out.push_back("fp");
    if (cen) out.push_back("cen");
    if (cma_module) out.push_back("cma_module");
    return out;
}

RunConfig RunConfig::defaults(const std::string& preset) {
    RunConfig c;
    c.preset = preset;
    if (preset == "paper") {
        c.data.T = 16;
        c.data.image_size = 224;
        c.data.norm_mean = {0.485, 0.456, 0.406};
        c.data.norm_std = {0.229, 0.224, 0.225};
        c.model.T = 16;
        c.model.image_size = 224;
        c.model.D = 512;
        c.model.heads = 8;
        c.model.visual_backbone = "resnet50";
        c.model.audio_backbone = "resnet18";
        c.synth.T = 16;
        c.synth.image_size = 224;
    } else if (preset == "desk") {
        c.data.T = 8;
        c.data.image_size = 64;
        c.data.norm_mean = {0.5, 0.5, 0.5};
        c.data.norm_std = {0.5, 0.5, 0.5};
        c.model.T = 8;
        c.model.image_size = 64;
        c.model.D = 64;
        c.model.heads = 4;
        c.model.visual_backbone = "desk";
        c.model.audio_backbone = "desk";
        c.synth.T = 8;
        c.synth.image_size = 64;
    } else {
        throw ConfigError("unknown preset: " + preset + " (expected desk or paper)");
    }
    return c;
}

namespace {

// strict field reader: every consumed key is checked off, leftovers throw
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config section " + path_ + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key " + path_ + key + ": " + e.what());
        }
        seen_.insert(key);
    }

    bool has(const char* key) const { return j_.contains(key); }

    json sub(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key: " + path_ + k);
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    std::string preset = "desk";
    if (j.contains("preset")) preset = j.at("preset").get<std::string>();
    RunConfig c = defaults(preset);

    Section root(j, "");
    std::string ignored_preset;
    root.get("preset", ignored_preset);

    if (root.has("data")) {
        Section s(root.sub("data"), "data.");
        s.get("T", c.data.T);
        s.get("image_size", c.data.image_size);
        s.get("norm_mean", c.data.norm_mean);
        s.get("norm_std", c.data.norm_std);
        if (s.has("augment")) {
            Section a(s.sub("augment"), "data.augment.");
            a.get("flip_p", c.data.augment.flip_p);
            a.get("jitter_p", c.data.augment.jitter_p);
            a.get("jitter_strength", c.data.augment.jitter_strength);
            a.get("gray_p", c.data.augment.gray_p);
            a.finish();
        }
        s.finish();
        c.model.T = c.data.T;
        c.model.image_size = c.data.image_size;
        c.synth.T = c.data.T;
        c.synth.image_size = c.data.image_size;
    }
    if (root.has("synth")) {
        Section s(root.sub("synth"), "synth.");
        s.get("G_synth", c.synth.G_synth);
        s.get("n_per_class", c.synth.n_per_class);
        s.get("fingerprint_amplitude", c.synth.fingerprint_amplitude);
        s.get("noise_level", c.synth.noise_level);
        s.get("seed", c.synth.seed);
        s.finish();
    }
    if (root.has("model")) {
        Section s(root.sub("model"), "model.");
        s.get("D", c.model.D);
        s.get("heads", c.model.heads);
        s.get("G", c.model.G);
        s.get("proj_dim", c.model.proj_dim);
        s.get("head_hidden", c.model.head_hidden);
        s.get("dropout", c.model.dropout);
        s.get("visual_backbone", c.model.visual_backbone);
        s.get("audio_backbone", c.model.audio_backbone);
        s.get("positional_encoding", c.model.positional_encoding);
        s.get("pretrained_init", c.model.pretrained_init);
        s.get("ln_eps", c.model.ln_eps);
        s.finish();
    }
    if (root.has("loss")) {
        Section s(root.sub("loss"), "loss.");
        s.get("lambda_attr", c.loss.lambda_attr);
        s.get("lambda_cont", c.loss.lambda_cont);
        s.get("lambda_fp", c.loss.lambda_fp);
        s.get("lambda_cen", c.loss.lambda_cen);
        s.get("alpha", c.loss.alpha);
        s.get("gamma", c.loss.gamma);
        s.get("tau", c.loss.tau);
        s.get("centroid_momentum", c.loss.centroid_momentum);
        s.get("alpha_on_fake", c.loss.alpha_on_fake);
        s.get("cont_exclude_fakes", c.loss.cont_exclude_fakes);
        s.get("defer_centroid_loss", c.loss.defer_centroid_loss);
        s.finish();
    }
    if (root.has("train")) {
        Section s(root.sub("train"), "train.");
        s.get("learning_rate", c.train.learning_rate);
        s.get("weight_decay", c.train.weight_decay);
        s.get("epochs", c.train.epochs);
        s.get("batch_size", c.train.batch_size);
        s.get("clip_norm", c.train.clip_norm);
        s.get("seed", c.train.seed);
        s.get("eval_every", c.train.eval_every);
        s.finish();
    }
    if (root.has("eval")) {
        Section s(root.sub("eval"), "eval.");
        s.get("threshold", c.eval.threshold);
        s.finish();
    }
    root.get("ablate", c.ablate);
    root.finish();

    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    try {
        return from_json(io::read_json(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
}

json RunConfig::to_json() const {
    json j;
    j["preset"] = preset;
    j["data"] = {{"T", data.T},
                 {"image_size", data.image_size},
                 {"norm_mean", data.norm_mean},
                 {"norm_std", data.norm_std},
                 {"augment",
                  {{"flip_p", data.augment.flip_p},
                   {"jitter_p", data.augment.jitter_p},
                   {"jitter_strength", data.augment.jitter_strength},
                   {"gray_p", data.augment.gray_p}}}};
    j["synth"] = {{"G_synth", synth.G_synth},
                  {"n_per_class", synth.n_per_class},
                  {"fingerprint_amplitude", synth.fingerprint_amplitude},
                  {"noise_level", synth.noise_level},
                  {"seed", synth.seed}};
    j["model"] = {{"D", model.D},
                  {"heads", model.heads},
                  {"G", model.G},
                  {"proj_dim", model.proj_dim},
                  {"head_hidden", model.head_hidden},
                  {"dropout", model.dropout},
                  {"visual_backbone", model.visual_backbone},
                  {"audio_backbone", model.audio_backbone},
                  {"positional_encoding", model.positional_encoding},
                  {"pretrained_init", model.pretrained_init},
                  {"ln_eps", model.ln_eps}};
    j["loss"] = {{"lambda_attr", loss.lambda_attr},
                 {"lambda_cont", loss.lambda_cont},
                 {"lambda_fp", loss.lambda_fp},
                 {"lambda_cen", loss.lambda_cen},
                 {"alpha", loss.alpha},
                 {"gamma", loss.gamma},
                 {"tau", loss.tau},
                 {"centroid_momentum", loss.centroid_momentum},
                 {"alpha_on_fake", loss.alpha_on_fake},
                 {"cont_exclude_fakes", loss.cont_exclude_fakes},
                 {"defer_centroid_loss", loss.defer_centroid_loss}};
    j["train"] = {{"learning_rate", train.learning_rate}, {"weight_decay", train.weight_decay},
                  {"epochs", train.epochs},               {"batch_size", train.batch_size},
                  {"clip_norm", train.clip_norm},         {"seed", train.seed},
                  {"eval_every", train.eval_every}};
    j["eval"] = {{"threshold", eval.threshold}};
    if (!ablate.empty()) j["ablate"] = ablate;
    return j;
}

void RunConfig::validate() const {
    if (data.T != model.T || data.image_size != model.image_size)
        throw ConfigError("data and model clip geometry disagree");
    train.validate();
    loss.validate();
    model.validate();
    AblateSet::parse(ablate);
    if (eval.threshold < 0.0 || eval.threshold > 1.0) throw ConfigError("eval.threshold must be in [0,1]");
}

}  // namespace avattr

