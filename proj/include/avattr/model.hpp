#pragma once

#include "avattr/nn.hpp"

namespace avattr {

template <class S>
struct NetConfig {
    int64_t T = 16;
    int64_t image_size = 224;
    int64_t D = 512;
    int64_t heads = 8;
    int64_t G = 3;  // fake generator classes; attribution head covers G+1
    int64_t proj_dim = 0;     // 0 -> D
    int64_t head_hidden = 0;  // 0 -> D
    double dropout = 0.3;
    std::string visual_backbone = "resnet50";
    std::string audio_backbone = "resnet18";
    bool positional_encoding = false;
    bool pretrained_init = false;
    double ln_eps = 1e-5;

    int64_t proj_dim_resolved() const { return proj_dim > 0 ? proj_dim : D; }
    int64_t head_hidden_resolved() const { return head_hidden > 0 ? head_hidden : D; }
    int64_t fused_dim() const { return 2 * D; }

    void validate() const {
        if (D <= 0 || heads <= 0 || D % heads != 0)
            throw std::invalid_argument("NetConfig: D must be positive and divisible by heads");
        if (T < 1) throw std::invalid_argument("NetConfig: T must be >= 1");
        if (G < 1) throw std::invalid_argument("NetConfig: G must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("NetConfig: dropout must be in [0,1)");
    }
};

template <class S>
struct BatchInput {
    Tensor<S> frames;  // [B*T, 3, S, S]
    Tensor<S> mel;     // [B, 1, 128, 128]
    std::vector<int> y, g;
    std::vector<std::string> ids;

    int64_t batch_size() const { return mel.dim(0); }
};

// every intermediate representation for one batch
template <class S>
struct Bundle {
    Var<S> z_v, z_a;      // encoder outputs          [B, D]
    Var<S> zt_v, zt_a;    // after cross-modal attn   [B, D]
    Var<S> z_f;           // fused                    [B, 2D]
    Var<S> p_v, p_a;      // unit projections         [B, P]
    Var<S> detect_logit;  // [B, 1]
    Var<S> detect_prob;   // [B, 1]
    Var<S> attr_logits;   // [B, G+1]
    Var<S> attr_probs;    // [B, G+1]
};

template <class S>
class Model {
public:
    Model(const NetConfig<S>& cfg, uint64_t seed) : cfg_(cfg), store_(seed) {
        cfg_.validate();
        if (cfg_.pretrained_init)
            throw std::invalid_argument(
                "pretrained_init: loading external weight files is not supported in this build");
        visual_ = Backbone<S>(store_, "visual", BackboneSpec::from_preset(cfg_.visual_backbone, 3));
        visual_proj_ = Linear<S>(store_, "visual_proj", visual_.feature_dim(), cfg_.D);
        visual_ln_ = LayerNorm<S>(store_, "visual_ln", cfg_.D, static_cast<S>(cfg_.ln_eps));
        if (cfg_.positional_encoding)
            pos_embed_ = store_.create("pos_embed", {cfg_.T, cfg_.D}, ParamStore<S>::Init::XavierNormal, cfg_.T,
                                       cfg_.D);
        temporal_mha_ = MultiHeadAttention<S>(store_, "temporal_mha", cfg_.D, cfg_.heads);
        temporal_ln_ = LayerNorm<S>(store_, "temporal_ln", cfg_.D, static_cast<S>(cfg_.ln_eps));

        // the audio stem is always built for RGB and then channel-averaged,
        // matching how a pretrained stem would be adapted
        audio_ = Backbone<S>(store_, "audio", BackboneSpec::from_preset(cfg_.audio_backbone, 3));
        audio_.adapt_stem_to_single_channel();
        audio_proj_ = Linear<S>(store_, "audio_proj", audio_.feature_dim(), cfg_.D);

        cross_v_ = MultiHeadAttention<S>(store_, "cross_v", cfg_.D, cfg_.heads);
        cross_a_ = MultiHeadAttention<S>(store_, "cross_a", cfg_.D, cfg_.heads);
        cross_ln_v_ = LayerNorm<S>(store_, "cross_ln_v", cfg_.D, static_cast<S>(cfg_.ln_eps));
        cross_ln_a_ = LayerNorm<S>(store_, "cross_ln_a", cfg_.D, static_cast<S>(cfg_.ln_eps));

        int64_t hid = cfg_.head_hidden_resolved(), fused = cfg_.fused_dim();
        detect_head_ = Mlp2<S>(store_, "detect_head", fused, hid, 1, cfg_.dropout);
        attr_head_ = Mlp2<S>(store_, "attr_head", fused, hid, cfg_.G + 1, cfg_.dropout);
        proj_v_ = Mlp2<S>(store_, "proj_v", cfg_.D, hid, cfg_.proj_dim_resolved(), 0.0);
        proj_a_ = Mlp2<S>(store_, "proj_a", cfg_.D, hid, cfg_.proj_dim_resolved(), 0.0);
    }

    // frames [N,3,S,S] -> per-frame features [N,D]; frames are independent
    Var<S> encode_frames(const Var<S>& frames) const {
        if (frames.val().dim(2) != cfg_.image_size || frames.val().dim(3) != cfg_.image_size ||
            frames.val().dim(1) != 3)
            throw std::invalid_argument("encode_frames: expected [N,3," + std::to_string(cfg_.image_size) + "," +
                                        std::to_string(cfg_.image_size) + "], got " + shape_str(frames.shape()));
        return relu(visual_ln_.forward(visual_proj_.forward(visual_.forward(frames))));
    }

    // self-attention over the T frame positions with residual + layer norm
    Var<S> temporal_attend(const Var<S>& H) const {
        Var<S> h = H;
        if (cfg_.positional_encoding) h = add(h, pos_embed_);
        return temporal_ln_.forward(add(h, temporal_mha_.forward(h, h, h)));
    }

    Var<S> pool_visual(const Var<S>& attended) const { return mean_axis0(attended); }

    // [B,1,128,128] -> [B,D]
    Var<S> encode_audio(const Var<S>& mel) const {
        if (mel.val().dim(1) != 1 || mel.val().dim(2) != 128 || mel.val().dim(3) != 128)
            throw std::invalid_argument("encode_audio: expected [B,1,128,128], got " + shape_str(mel.shape()));
        return audio_proj_.forward(audio_.forward(mel));
    }

    std::pair<Var<S>, Var<S>> cross_modal_attend(const Var<S>& z_v, const Var<S>& z_a) const {
        if (z_v.val().shape != z_a.val().shape)
            throw std::invalid_argument("cross_modal_attend: shape mismatch " + shape_str(z_v.shape()) + " vs " +
                                        shape_str(z_a.shape()));
        Var<S> zt_v = cross_ln_v_.forward(add(z_v, cross_v_.forward_single_token(z_a)));
        Var<S> zt_a = cross_ln_a_.forward(add(z_a, cross_a_.forward_single_token(z_v)));
        return {zt_v, zt_a};
    }

    Var<S> fuse(const Var<S>& zt_v, const Var<S>& zt_a) const { return concat_cols(zt_v, zt_a); }

    Bundle<S> forward(const BatchInput<S>& batch, bool train, Rng* dropout_rng,
                      bool bypass_cross_attention = false) const {
        int64_t B = batch.batch_size();
        int64_t T = cfg_.T;
        if (batch.frames.dim(0) != B * T)
            throw std::invalid_argument("forward: frames count does not match B*T");
        Bundle<S> out;

        Var<S> frames(batch.frames, false);
        Var<S> H_all = encode_frames(frames);
        std::vector<Var<S>> pooled;
        pooled.reserve(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b)
            pooled.push_back(pool_visual(temporal_attend(slice_rows(H_all, b * T, (b + 1) * T))));
        out.z_v = concat_rows(pooled);

        Var<S> mel(batch.mel, false);
        out.z_a = encode_audio(mel);

        if (bypass_cross_attention) {
            out.zt_v = out.z_v;
            out.zt_a = out.z_a;
        } else {
            auto [zt_v, zt_a] = cross_modal_attend(out.z_v, out.z_a);
            out.zt_v = zt_v;
            out.zt_a = zt_a;
        }
        out.z_f = fuse(out.zt_v, out.zt_a);

        out.detect_logit = detect_head_.forward(out.z_f, train, dropout_rng);
        out.detect_prob = sigmoid(out.detect_logit);
        out.attr_logits = attr_head_.forward(out.z_f, train, dropout_rng);
        out.attr_probs = softmax_rows(out.attr_logits);

        out.p_v = normalize_rows(proj_v_.forward(out.zt_v, false, nullptr));
        out.p_a = normalize_rows(proj_a_.forward(out.zt_a, false, nullptr));
        return out;
    }

    ParamStore<S>& store() { return store_; }
    const ParamStore<S>& store() const { return store_; }
    const NetConfig<S>& config() const { return cfg_; }
    const Backbone<S>& visual_backbone() const { return visual_; }
    const Backbone<S>& audio_backbone() const { return audio_; }
    MultiHeadAttention<S>& temporal_mha() { return temporal_mha_; }
    MultiHeadAttention<S>& cross_mha_v() { return cross_v_; }
    MultiHeadAttention<S>& cross_mha_a() { return cross_a_; }

private:
    NetConfig<S> cfg_;
    ParamStore<S> store_;
    Backbone<S> visual_;
    Linear<S> visual_proj_;
    LayerNorm<S> visual_ln_;
    Var<S> pos_embed_;
    MultiHeadAttention<S> temporal_mha_;
    LayerNorm<S> temporal_ln_;
    Backbone<S> audio_;
    Linear<S> audio_proj_;
    MultiHeadAttention<S> cross_v_, cross_a_;
    LayerNorm<S> cross_ln_v_, cross_ln_a_;
    Mlp2<S> detect_head_, attr_head_;
    Mlp2<S> proj_v_, proj_a_;
};

}  // namespace avattr
