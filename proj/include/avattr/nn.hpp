#pragma once

#include <map>
#include <optional>

#include "avattr/autograd.hpp"

namespace avattr {

// Parameter registry. Every parameter is initialized from an independent
// rng stream keyed by its full name, so initialization is reproducible and
// insensitive to construction order.
template <class S>
class ParamStore {
public:
    explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

    enum class Init { Zero, One, HeNormal, XavierNormal };

    Var<S> create(const std::string& name, Shape shape, Init kind, int64_t fan_in = 0, int64_t fan_out = 0) {
        if (by_name_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        Tensor<S> t(shape);
        Rng rng = Rng::stream(seed_, "init", Rng::hash_tag(name));
        switch (kind) {
            case Init::Zero:
                break;
            case Init::One:
                t.fill(S(1));
                break;
            case Init::HeNormal: {
                double std = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (auto& v : t.data) v = static_cast<S>(rng.normal() * std);
                break;
            }
            case Init::XavierNormal: {
                double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
                for (auto& v : t.data) v = static_cast<S>(rng.normal() * std);
                break;
            }
        }
        Var<S> p(std::move(t), true);
        names_.push_back(name);
        params_.push_back(p);
        by_name_[name] = params_.size() - 1;
        return p;
    }

    std::vector<Var<S>>& params() { return params_; }
    const std::vector<std::string>& names() const { return names_; }
    Var<S>& by_name(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::out_of_range("no parameter named " + name);
        return params_[it->second];
    }
    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.val().numel();
        return n;
    }

private:
    uint64_t seed_;
    std::vector<Var<S>> params_;
    std::vector<std::string> names_;
    std::map<std::string, size_t> by_name_;
};

// ------------------------------------------------------------------ layers

template <class S>
struct Linear {
    Var<S> weight;  // [out, in]
    Var<S> bias;    // [out]

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out,
           typename ParamStore<S>::Init kind = ParamStore<S>::Init::HeNormal) {
        weight = ps.create(name + ".weight", {out, in}, kind, in, out);
        bias = ps.create(name + ".bias", {out}, ParamStore<S>::Init::Zero);
    }

    Var<S> forward(const Var<S>& x) const { return add_rowvec(matmul_nt(x, weight), bias); }
};

template <class S>
struct LayerNorm {
    Var<S> gamma, beta;
    S eps;

    LayerNorm() = default;
    LayerNorm(ParamStore<S>& ps, const std::string& name, int64_t dim, S eps_ = S(1e-5)) : eps(eps_) {
        gamma = ps.create(name + ".gamma", {dim}, ParamStore<S>::Init::One);
        beta = ps.create(name + ".beta", {dim}, ParamStore<S>::Init::Zero);
    }

    Var<S> forward(const Var<S>& x) const { return layer_norm_rows(x, gamma, beta, eps); }
};

template <class S>
struct GroupNorm {
    Var<S> gamma, beta;
    int64_t groups;
    S eps;

    GroupNorm() = default;
    GroupNorm(ParamStore<S>& ps, const std::string& name, int64_t channels, int64_t groups_, S eps_ = S(1e-5))
        : groups(groups_), eps(eps_) {
        gamma = ps.create(name + ".gamma", {channels}, ParamStore<S>::Init::One);
        beta = ps.create(name + ".beta", {channels}, ParamStore<S>::Init::Zero);
    }

    Var<S> forward(const Var<S>& x) const { return group_norm(x, groups, gamma, beta, eps); }
};

template <class S>
struct Conv2d {
    Var<S> weight;  // [out, in, k, k]
    Var<S> bias;    // [out]
    int64_t stride, pad;

    Conv2d() = default;
    Conv2d(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out, int64_t k, int64_t stride_,
           int64_t pad_)
        : stride(stride_), pad(pad_) {
        weight = ps.create(name + ".weight", {out, in, k, k}, ParamStore<S>::Init::HeNormal, in * k * k);
        bias = ps.create(name + ".bias", {out}, ParamStore<S>::Init::Zero);
    }

    Var<S> forward(const Var<S>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

// Averages the input-channel axis of a first-layer conv weight so a
// network initialized (or pretrained) for RGB input accepts one channel.
template <class S>
Tensor<S> adapt_first_layer(const Tensor<S>& rgb_weights) {
    if (rgb_weights.rank() != 4 || rgb_weights.dim(1) != 3)
        throw std::invalid_argument("adapt_first_layer: expected [out,3,k,k], got " + shape_str(rgb_weights.shape));
    int64_t out = rgb_weights.dim(0), kh = rgb_weights.dim(2), kw = rgb_weights.dim(3);
    Tensor<S> mono({out, 1, kh, kw});
    int64_t kk = kh * kw;
    for (int64_t o = 0; o < out; ++o)
        for (int64_t t = 0; t < kk; ++t) {
            S s = S(0);
            for (int64_t c = 0; c < 3; ++c) s += rgb_weights[(o * 3 + c) * kk + t];
            mono[o * kk + t] = s / S(3);
        }
    return mono;
}

// ---------------------------------------------------------- attention

template <class S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    int64_t heads = 1;
    int64_t dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<S>& ps, const std::string& name, int64_t dim_, int64_t heads_)
        : heads(heads_), dim(dim_) {
        if (dim_ % heads_ != 0) throw std::invalid_argument("attention dim must divide heads");
        wq = Linear<S>(ps, name + ".wq", dim_, dim_, ParamStore<S>::Init::XavierNormal);
        wk = Linear<S>(ps, name + ".wk", dim_, dim_, ParamStore<S>::Init::XavierNormal);
        wv = Linear<S>(ps, name + ".wv", dim_, dim_, ParamStore<S>::Init::XavierNormal);
        wo = Linear<S>(ps, name + ".wo", dim_, dim_, ParamStore<S>::Init::XavierNormal);
    }

    // query [nq, dim] attends over keys/values [nk, dim]
    Var<S> forward(const Var<S>& query, const Var<S>& key, const Var<S>& value) const {
        Var<S> q = wq.forward(query);
        Var<S> k = wk.forward(key);
        Var<S> v = wv.forward(value);
        int64_t dh = dim / heads;
        S scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
        Var<S> merged;
        for (int64_t h = 0; h < heads; ++h) {
            Var<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
            Var<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
            Var<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
            Var<S> attn = softmax_rows(mul_scalar(matmul_nt(qh, kh), scale));
            Var<S> oh = matmul(attn, vh);
            merged = h == 0 ? oh : concat_cols(merged, oh);
        }
        return wo.forward(merged);
    }

    // With a single key per query the attention weight is identically 1,
    // so MHA collapses to the value and output projections. Used for the
    // per-sample cross-modal step, where it is exact (the query/key
    // projections receive no gradient in this regime).
    Var<S> forward_single_token(const Var<S>& kv_batch) const { return wo.forward(wv.forward(kv_batch)); }
};

// two-layer MLP head, ReLU and optional dropout between the layers
template <class S>
struct Mlp2 {
    Linear<S> fc1, fc2;
    double dropout_p = 0.0;

    Mlp2() = default;
    Mlp2(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t hidden, int64_t out, double dropout)
        : dropout_p(dropout) {
        fc1 = Linear<S>(ps, name + ".fc1", in, hidden);
        fc2 = Linear<S>(ps, name + ".fc2", hidden, out);
    }

    Var<S> forward(const Var<S>& x, bool train, Rng* rng) const {
        Var<S> h = relu(fc1.forward(x));
        if (train && dropout_p > 0.0 && rng) h = dropout(h, dropout_p, *rng);
        return fc2.forward(h);
    }
};

// ------------------------------------------------------------- backbones

struct BackboneSpec {
    enum class Block { Basic, Bottleneck };
    struct Stage {
        int64_t channels;
        int64_t blocks;
        int64_t stride;
    };

    std::string preset;
    int64_t in_channels = 3;
    int64_t stem_channels = 16;
    int64_t stem_kernel = 3;
    int64_t stem_stride = 2;
    bool stem_maxpool = false;
    Block block = Block::Basic;
    std::vector<Stage> stages;
    int64_t gn_groups = 8;
    int64_t feature_dim = 0;  // width after global average pooling

    static BackboneSpec desk(int64_t in_channels) {
        BackboneSpec s;
        s.preset = "desk";
        s.in_channels = in_channels;
        s.stem_channels = 16;
        s.stem_kernel = 3;
        s.stem_stride = 2;
        s.stages = {{32, 1, 2}, {64, 1, 2}, {64, 1, 2}};
        s.gn_groups = 8;
        s.feature_dim = 64;
        return s;
    }

    static BackboneSpec resnet18(int64_t in_channels) {
        BackboneSpec s;
        s.preset = "resnet18";
        s.in_channels = in_channels;
        s.stem_channels = 64;
        s.stem_kernel = 7;
        s.stem_stride = 2;
        s.stem_maxpool = true;
        s.stages = {{64, 2, 1}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}};
        s.gn_groups = 32;
        s.feature_dim = 512;
        return s;
    }

    static BackboneSpec resnet50(int64_t in_channels) {
        BackboneSpec s;
        s.preset = "resnet50";
        s.in_channels = in_channels;
        s.stem_channels = 64;
        s.stem_kernel = 7;
        s.stem_stride = 2;
        s.stem_maxpool = true;
        s.block = Block::Bottleneck;
        s.stages = {{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}};
        s.gn_groups = 32;
        s.feature_dim = 2048;  // 512 * bottleneck expansion
        return s;
    }

    static BackboneSpec from_preset(const std::string& preset, int64_t in_channels) {
        if (preset == "desk") return desk(in_channels);
        if (preset == "resnet18") return resnet18(in_channels);
        if (preset == "resnet50") return resnet50(in_channels);
        throw std::invalid_argument("unknown backbone preset: " + preset);
    }
};

// Residual conv net: stem -> stages of residual blocks -> global average
// pool. Normalization is per-sample group norm, so frames in a batch are
// processed independently in every mode.
template <class S>
class Backbone {
public:
    static constexpr int64_t kBottleneckExpansion = 4;

    Backbone() = default;
    Backbone(ParamStore<S>& ps, const std::string& name, const BackboneSpec& spec) : spec_(spec) {
        int64_t pad = spec.stem_kernel / 2;
        stem_ = Conv2d<S>(ps, name + ".stem.conv", spec.in_channels, spec.stem_channels, spec.stem_kernel,
                          spec.stem_stride, pad);
        stem_gn_ = GroupNorm<S>(ps, name + ".stem.gn", spec.stem_channels, groups_for(spec.stem_channels));
        int64_t in = spec.stem_channels;
        for (size_t si = 0; si < spec.stages.size(); ++si) {
            const auto& st = spec.stages[si];
            for (int64_t bi = 0; bi < st.blocks; ++bi) {
                std::string bname = name + ".stage" + std::to_string(si) + ".block" + std::to_string(bi);
                int64_t stride = bi == 0 ? st.stride : 1;
                blocks_.push_back(make_block(ps, bname, in, st.channels, stride));
                in = spec.block == BackboneSpec::Block::Bottleneck ? st.channels * kBottleneckExpansion : st.channels;
            }
        }
        if (in != spec.feature_dim) throw std::logic_error("backbone feature width mismatch");
    }

    // [N, in_channels, H, W] -> [N, feature_dim]
    Var<S> forward(const Var<S>& x) const {
        Var<S> h = relu(stem_gn_.forward(stem_.forward(x)));
        if (spec_.stem_maxpool) h = maxpool2d(h, 3, 2, 1);
        for (const auto& b : blocks_) h = block_forward(b, h);
        return global_avg_pool(h);
    }

    int64_t feature_dim() const { return spec_.feature_dim; }
    const BackboneSpec& spec() const { return spec_; }

    // replace the stem with a single-channel conv whose weights are the
    // channel mean of the existing stem weights
    void adapt_stem_to_single_channel() {
        Tensor<S> mono = adapt_first_layer<S>(stem_.weight.val());
        stem_.weight.val() = std::move(mono);
        spec_.in_channels = 1;
    }

private:
    struct ResBlock {
        Conv2d<S> conv1, conv2, conv3;
        GroupNorm<S> gn1, gn2, gn3;
        std::optional<Conv2d<S>> down;
        std::optional<GroupNorm<S>> down_gn;
        bool bottleneck = false;
    };

    int64_t groups_for(int64_t channels) const { return std::min<int64_t>(spec_.gn_groups, channels); }

    ResBlock make_block(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t width, int64_t stride) {
        ResBlock b;
        b.bottleneck = spec_.block == BackboneSpec::Block::Bottleneck;
        int64_t out = b.bottleneck ? width * kBottleneckExpansion : width;
        if (b.bottleneck) {
            b.conv1 = Conv2d<S>(ps, name + ".conv1", in, width, 1, 1, 0);
            b.gn1 = GroupNorm<S>(ps, name + ".gn1", width, groups_for(width));
            b.conv2 = Conv2d<S>(ps, name + ".conv2", width, width, 3, stride, 1);
            b.gn2 = GroupNorm<S>(ps, name + ".gn2", width, groups_for(width));
            b.conv3 = Conv2d<S>(ps, name + ".conv3", width, out, 1, 1, 0);
            b.gn3 = GroupNorm<S>(ps, name + ".gn3", out, groups_for(out));
        } else {
            b.conv1 = Conv2d<S>(ps, name + ".conv1", in, width, 3, stride, 1);
            b.gn1 = GroupNorm<S>(ps, name + ".gn1", width, groups_for(width));
            b.conv2 = Conv2d<S>(ps, name + ".conv2", width, width, 3, 1, 1);
            b.gn2 = GroupNorm<S>(ps, name + ".gn2", width, groups_for(width));
        }
        if (stride != 1 || in != out) {
            b.down = Conv2d<S>(ps, name + ".down", in, out, 1, stride, 0);
            b.down_gn = GroupNorm<S>(ps, name + ".down_gn", out, groups_for(out));
        }
        return b;
    }

    Var<S> block_forward(const ResBlock& b, const Var<S>& x) const {
        Var<S> idn = b.down ? b.down_gn->forward(b.down->forward(x)) : x;
        Var<S> h = relu(b.gn1.forward(b.conv1.forward(x)));
        if (b.bottleneck) {
            h = relu(b.gn2.forward(b.conv2.forward(h)));
            h = b.gn3.forward(b.conv3.forward(h));
        } else {
            h = b.gn2.forward(b.conv2.forward(h));
        }
        return relu(add(h, idn));
    }

    BackboneSpec spec_;
    Conv2d<S> stem_;
    GroupNorm<S> stem_gn_;
    std::vector<ResBlock> blocks_;
};

}  // namespace avattr
