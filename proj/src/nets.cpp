#include "uda/nets.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace uda {

ComponentMask mask_of(std::initializer_list<Component> components) {
    ComponentMask m;
    for (Component c : components) m.set(static_cast<std::size_t>(c));
    return m;
}

std::string_view component_name(Component c) {
    switch (c) {
        case Component::e_s:
            return "e_s";
        case Component::e_t:
            return "e_t";
        case Component::e_z:
            return "e_z";
        case Component::d_z:
            return "d_z";
        case Component::d_s:
            return "d_s";
        case Component::d_t:
            return "d_t";
        case Component::seg:
            return "seg";
        case Component::disc:
            return "disc";
    }
    return "?";
}

std::string mask_str(const ComponentMask& m) {
    std::string out = "{";
    bool first = true;
    for (Component c : kAllComponents) {
        if (!m.test(static_cast<std::size_t>(c))) continue;
        if (!first) out += ",";
        out += component_name(c);
        first = false;
    }
    return out + "}";
}

namespace {

template <class T>
Tensor<T> he_normal(Shape shape, int fan_in, double gain, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

bool on(const ComponentMask& m, Component c) { return m.test(static_cast<std::size_t>(c)); }

}  // namespace

namespace layers {

template <class T>
Conv<T>::Conv(std::string name, int in, int out, int k, ad::ConvSpec s, std::mt19937_64& rng, double gain)
    : weight(name + ".weight", he_normal<T>({out, in, k, k}, in * k * k, gain, rng)),
      bias(name + ".bias", Tensor<T>({out})),
      spec(s) {}

template <class T>
ad::Var<T> Conv<T>::operator()(const ad::Var<T>& x, bool trainable) const {
    return ad::conv2d(x, weight.var(trainable), bias.var(trainable), spec);
}

template <class T>
ConvTranspose<T>::ConvTranspose(std::string name, int in, int out, int k, int s, int p, std::mt19937_64& rng)
    : weight(name + ".weight", he_normal<T>({in, out, k, k}, in * k * k / (s * s), 1.0, rng)),
      bias(name + ".bias", Tensor<T>({out})),
      stride(s),
      pad(p) {}

template <class T>
ad::Var<T> ConvTranspose<T>::operator()(const ad::Var<T>& x, bool trainable) const {
    return ad::conv_transpose2d(x, weight.var(trainable), bias.var(trainable), stride, pad);
}

template <class T>
InstanceNorm<T>::InstanceNorm(std::string name, int channels)
    : gamma(name + ".gamma", Tensor<T>({channels}, T(1))), beta(name + ".beta", Tensor<T>({channels})) {}

template <class T>
ad::Var<T> InstanceNorm<T>::operator()(const ad::Var<T>& x, bool trainable) const {
    return ad::instance_norm(x, gamma.var(trainable), beta.var(trainable));
}

template <class T>
ResBlock<T>::ResBlock(std::string name, int channels, int dilation, T s, std::mt19937_64& rng)
    : conv1(name + ".conv1", channels, channels, 3, {1, dilation, dilation}, rng),
      conv2(name + ".conv2", channels, channels, 3, {1, dilation, dilation}, rng, 0.5),
      norm1(name + ".norm1", channels),
      norm2(name + ".norm2", channels),
      slope(s) {}

template <class T>
ad::Var<T> ResBlock<T>::operator()(const ad::Var<T>& x, bool trainable) const {
    auto h = ad::leaky_relu(norm1(conv1(x, trainable), trainable), slope);
    h = norm2(conv2(h, trainable), trainable);
    return ad::leaky_relu(ad::add(x, h), slope);
}

}  // namespace layers

template <class T>
NetworkSet<T>::NetworkSet(NetConfig config, std::uint64_t seed) : config_(config) {
    using layers::Conv;
    using layers::ConvTranspose;
    using layers::InstanceNorm;
    using layers::ResBlock;
    if (config_.in_channels < 1 || config_.base_channels < 1 || config_.latent_channels < 1 ||
        config_.seg_channels < 1 || config_.disc_channels < 1 || config_.num_classes < 2) {
        throw ConfigError("network widths must be positive and num_classes >= 2");
    }
    if (config_.disc_downsample < 1 || config_.disc_downsample > 3)
        throw ConfigError("disc_downsample must be 1, 2 or 3");
    std::mt19937_64 rng(seed);
    const int cin = config_.in_channels;
    const int base = config_.base_channels;
    const int cz = config_.latent_channels;
    const T slope = static_cast<T>(config_.leaky_slope);

    auto make_front = [&](const std::string& p) {
        EncoderFront f;
        f.conv1 = Conv<T>(p + ".conv1", cin, base, 3, {2, 1, 1}, rng);
        f.norm1 = InstanceNorm<T>(p + ".norm1", base);
        f.conv2 = Conv<T>(p + ".conv2", base, cz, 3, {2, 1, 1}, rng);
        f.norm2 = InstanceNorm<T>(p + ".norm2", cz);
        return f;
    };
    e_s_ = make_front("e_s");
    e_t_ = make_front("e_t");

    for (int i = 0; i < config_.ez_blocks; ++i) {
        e_z_.blocks.emplace_back("e_z.block" + std::to_string(i), cz, 1, slope, rng);
    }
    e_z_.mu_conv = Conv<T>("e_z.mu_conv", cz, cz, 3, {1, 1, 1}, rng);
    e_z_.mu_norm = InstanceNorm<T>("e_z.mu_norm", cz);
    e_z_.mu_head = Conv<T>("e_z.mu_head", cz, cz, 1, {1, 0, 1}, rng, 0.5);
    e_z_.lv_conv = Conv<T>("e_z.lv_conv", cz, cz, 3, {1, 1, 1}, rng);
    e_z_.lv_norm = InstanceNorm<T>("e_z.lv_norm", cz);
    e_z_.lv_head = Conv<T>("e_z.lv_head", cz, cz, 1, {1, 0, 1}, rng, 0.1);

    for (int i = 0; i < config_.dz_blocks; ++i) {
        d_z_.blocks.emplace_back("d_z.block" + std::to_string(i), cz, 1, slope, rng);
    }

    auto make_tail = [&](const std::string& p) {
        DecoderTail t;
        const int half = std::max(1, base / 2);
        t.up1 = ConvTranspose<T>(p + ".up1", cz, base, 4, 2, 1, rng);
        t.norm1 = InstanceNorm<T>(p + ".norm1", base);
        t.up2 = ConvTranspose<T>(p + ".up2", base, half, 4, 2, 1, rng);
        t.norm2 = InstanceNorm<T>(p + ".norm2", half);
        t.out = Conv<T>(p + ".out", half, cin, 3, {1, 1, 1}, rng, 0.5);
        return t;
    };
    d_s_ = make_tail("d_s");
    d_t_ = make_tail("d_t");

    const int sc = config_.seg_channels;
    seg_.proj = Conv<T>("seg.proj", cz, sc, 1, {1, 0, 1}, rng);
    static constexpr std::array<int, 3> kDilations{1, 2, 4};
    for (int i = 0; i < config_.seg_blocks; ++i) {
        seg_.blocks.emplace_back("seg.block" + std::to_string(i), sc, kDilations[static_cast<std::size_t>(i) % 3],
                                 slope, rng);
    }
    seg_.classifier = Conv<T>("seg.classifier", sc, config_.num_classes, 1, {1, 0, 1}, rng, 0.5);

    const int dc = config_.disc_channels;
    auto stride = [&](int i) { return i < config_.disc_downsample ? 2 : 1; };
    disc_.conv1 = Conv<T>("disc.conv1", cin, dc, 3, {stride(0), 1, 1}, rng);
    disc_.conv2 = Conv<T>("disc.conv2", dc, 2 * dc, 3, {stride(1), 1, 1}, rng);
    disc_.norm2 = InstanceNorm<T>("disc.norm2", 2 * dc);
    disc_.conv3 = Conv<T>("disc.conv3", 2 * dc, 2 * dc, 3, {stride(2), 1, 1}, rng);
    disc_.norm3 = InstanceNorm<T>("disc.norm3", 2 * dc);
    disc_.head = Conv<T>("disc.head", 2 * dc, 1, 1, {1, 0, 1}, rng, 0.5);
}

template <class T>
ad::Var<T> NetworkSet<T>::front_forward(const EncoderFront& f, const ad::Var<T>& x, bool trainable) const {
    const T slope = static_cast<T>(config_.leaky_slope);
    auto h = ad::leaky_relu(f.norm1(f.conv1(x, trainable), trainable), slope);
    return ad::leaky_relu(f.norm2(f.conv2(h, trainable), trainable), slope);
}

template <class T>
LatentPosterior<T> NetworkSet<T>::encode(const ad::Var<T>& x, Domain domain, const ComponentMask& trainable) const {
    if (x.value().rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
        throw ShapeError("encode: expected (N," + std::to_string(config_.in_channels) +
                         ",H,W) with H, W divisible by 4, got " + shape_str(x.shape()));
    }
    const T slope = static_cast<T>(config_.leaky_slope);
    const bool src = domain == Domain::source;
    auto h = front_forward(src ? e_s_ : e_t_, x, on(trainable, src ? Component::e_s : Component::e_t));

    const bool tz = on(trainable, Component::e_z);
    for (const auto& b : e_z_.blocks) h = b(h, tz);
    auto hm = ad::leaky_relu(e_z_.mu_norm(e_z_.mu_conv(h, tz), tz), slope);
    auto hv = ad::leaky_relu(e_z_.lv_norm(e_z_.lv_conv(h, tz), tz), slope);
    LatentPosterior<T> post;
    post.mu = e_z_.mu_head(hm, tz);
    post.log_var =
        ad::clamp(e_z_.lv_head(hv, tz), static_cast<T>(config_.log_var_min), static_cast<T>(config_.log_var_max));
    return post;
}

template <class T>
ad::Var<T> NetworkSet<T>::tail_forward(const DecoderTail& t, const ad::Var<T>& h, bool trainable) const {
    const T slope = static_cast<T>(config_.leaky_slope);
    auto y = ad::leaky_relu(t.norm1(t.up1(h, trainable), trainable), slope);
    y = ad::leaky_relu(t.norm2(t.up2(y, trainable), trainable), slope);
    return ad::sigmoid(t.out(y, trainable));
}

template <class T>
ad::Var<T> NetworkSet<T>::decode(const ad::Var<T>& z, Domain domain, const ComponentMask& trainable) const {
    if (z.value().rank() != 4 || z.dim(1) != config_.latent_channels) {
        throw ShapeError("decode: expected latent (N," + std::to_string(config_.latent_channels) + ",h,w), got " +
                         shape_str(z.shape()));
    }
    const bool tz = on(trainable, Component::d_z);
    auto h = z;
    for (const auto& b : d_z_.blocks) h = b(h, tz);
    const bool src = domain == Domain::source;
    return tail_forward(src ? d_s_ : d_t_, h, on(trainable, src ? Component::d_s : Component::d_t));
}

template <class T>
ad::Var<T> NetworkSet<T>::segment_logits(const ad::Var<T>& z, const ComponentMask& trainable) const {
    if (z.value().rank() != 4 || z.dim(1) != config_.latent_channels) {
        throw ShapeError("segment: expected latent (N," + std::to_string(config_.latent_channels) + ",h,w), got " +
                         shape_str(z.shape()));
    }
    const bool ts = on(trainable, Component::seg);
    const T slope = static_cast<T>(config_.leaky_slope);
    auto h = ad::leaky_relu(seg_.proj(z, ts), slope);
    for (const auto& b : seg_.blocks) h = b(h, ts);
    return ad::upsample_bilinear(seg_.classifier(h, ts), 4);
}

template <class T>
ad::Var<T> NetworkSet<T>::segment(const ad::Var<T>& z, const ComponentMask& trainable) const {
    return ad::softmax_channels(segment_logits(z, trainable));
}

template <class T>
ad::Var<T> NetworkSet<T>::discriminate(const ad::Var<T>& x, const ComponentMask& trainable) const {
    if (x.value().rank() != 4 || x.dim(1) != config_.in_channels) {
        throw ShapeError("discriminate: bad input shape " + shape_str(x.shape()));
    }
    const bool td = on(trainable, Component::disc);
    const T slope = static_cast<T>(config_.leaky_slope);
    auto h = ad::leaky_relu(disc_.conv1(x, td), slope);
    h = ad::leaky_relu(disc_.norm2(disc_.conv2(h, td), td), slope);
    h = ad::leaky_relu(disc_.norm3(disc_.conv3(h, td), td), slope);
    auto logit = ad::global_avg_pool(disc_.head(h, td));  // (N, 1)
    // Keeps log D and log(1 - D) finite in single precision.
    const T eps = std::is_same_v<T, float> ? T(1e-6) : T(1e-12);
    return ad::clamp(ad::sigmoid(ad::reshape(logit, {x.dim(0)})), eps, T(1) - eps);
}

template <class T>
std::vector<const ad::Parameter<T>*> NetworkSet<T>::parameters(Component c) const {
    std::vector<const ad::Parameter<T>*> out;
    auto conv = [&](const layers::Conv<T>& l) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    };
    auto convt = [&](const layers::ConvTranspose<T>& l) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    };
    auto norm = [&](const layers::InstanceNorm<T>& l) {
        out.push_back(&l.gamma);
        out.push_back(&l.beta);
    };
    auto block = [&](const layers::ResBlock<T>& b) {
        conv(b.conv1);
        norm(b.norm1);
        conv(b.conv2);
        norm(b.norm2);
    };
    auto front = [&](const EncoderFront& f) {
        conv(f.conv1);
        norm(f.norm1);
        conv(f.conv2);
        norm(f.norm2);
    };
    auto tail = [&](const DecoderTail& t) {
        convt(t.up1);
        norm(t.norm1);
        convt(t.up2);
        norm(t.norm2);
        conv(t.out);
    };
    switch (c) {
        case Component::e_s:
            front(e_s_);
            break;
        case Component::e_t:
            front(e_t_);
            break;
        case Component::e_z:
            for (const auto& b : e_z_.blocks) block(b);
            conv(e_z_.mu_conv);
            norm(e_z_.mu_norm);
            conv(e_z_.mu_head);
            conv(e_z_.lv_conv);
            norm(e_z_.lv_norm);
            conv(e_z_.lv_head);
            break;
        case Component::d_z:
            for (const auto& b : d_z_.blocks) block(b);
            break;
        case Component::d_s:
            tail(d_s_);
            break;
        case Component::d_t:
            tail(d_t_);
            break;
        case Component::seg:
            conv(seg_.proj);
            for (const auto& b : seg_.blocks) block(b);
            conv(seg_.classifier);
            break;
        case Component::disc:
            conv(disc_.conv1);
            conv(disc_.conv2);
            norm(disc_.norm2);
            conv(disc_.conv3);
            norm(disc_.norm3);
            conv(disc_.head);
            break;
    }
    return out;
}

template <class T>
std::vector<ad::Parameter<T>*> NetworkSet<T>::parameters(Component c) {
    std::vector<ad::Parameter<T>*> out;
    for (const auto* p : std::as_const(*this).parameters(c)) out.push_back(const_cast<ad::Parameter<T>*>(p));
    return out;
}

template <class T>
std::vector<ad::Parameter<T>*> NetworkSet<T>::parameters() {
    std::vector<ad::Parameter<T>*> out;
    for (Component c : kAllComponents) {
        auto p = parameters(c);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

template <class T>
std::size_t NetworkSet<T>::parameter_count(Component c) const {
    std::size_t n = 0;
    for (const auto* p : parameters(c)) n += p->numel();
    return n;
}

template <class T>
void NetworkSet<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <class T>
void NetworkSet<T>::copy_component(Component from, Component to) {
    auto src = parameters(from);
    auto dst = parameters(to);
    if (src.size() != dst.size()) throw ConfigError("copy_component: incompatible components");
    for (std::size_t i = 0; i < src.size(); ++i) {
        require_same_shape(src[i]->value().shape, dst[i]->value().shape, "copy_component");
        dst[i]->value() = src[i]->value();
    }
}

template <class T>
Tensor<T> standard_normal(const Shape& shape, std::mt19937_64& rng) {
    Tensor<T> t(shape);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

template <class T>
ad::Var<T> sample_with_noise(const LatentPosterior<T>& post, const Tensor<T>& eps) {
    require_same_shape(post.mu.shape(), post.log_var.shape(), "sample: mu/log_var");
    require_same_shape(post.mu.shape(), eps.shape, "sample: noise");
    auto sigma = ad::exp(ad::mul_scalar(post.log_var, T(0.5)));
    return ad::add(post.mu, ad::mul(sigma, ad::constant(eps)));
}

template <class T>
ad::Var<T> sample(const LatentPosterior<T>& post, std::mt19937_64& rng) {
    return sample_with_noise(post, standard_normal<T>(post.mu.shape(), rng));
}

GradCheckResult grad_check(const std::vector<ad::Parameter<double>*>& params,
                           const std::function<ad::Var<double>()>& loss_fn, int n_probe, double step, double tolerance,
                           std::uint64_t seed) {
    std::vector<std::pair<ad::Parameter<double>*, std::size_t>> slots;
    for (auto* p : params) {
        for (std::size_t i = 0; i < p->numel(); ++i) slots.emplace_back(p, i);
    }
    if (slots.empty()) throw ConfigError("grad_check: no parameters");
    std::mt19937_64 rng(seed);
    std::shuffle(slots.begin(), slots.end(), rng);
    if (static_cast<int>(slots.size()) > n_probe) slots.resize(static_cast<std::size_t>(n_probe));

    for (auto* p : params) p->zero_grad();
    ad::backward(loss_fn());

    GradCheckResult r;
    for (auto [p, i] : slots) {
        const double analytic = p->has_grad() ? p->grad()[i] : 0.0;
        const double orig = p->value()[i];
        p->value()[i] = orig + step;
        const double up = loss_fn().item();
        p->value()[i] = orig - step;
        const double down = loss_fn().item();
        p->value()[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double abs_err = std::abs(analytic - numeric);
        const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        r.max_rel_error = std::max(r.max_rel_error, rel);
        r.max_abs_error = std::max(r.max_abs_error, abs_err);
        ++r.probes;
    }
    for (auto* p : params) p->zero_grad();
    r.passed = r.max_rel_error < tolerance;
    return r;
}

template class NetworkSet<float>;
template class NetworkSet<double>;
template ad::Var<float> sample_with_noise<float>(const LatentPosterior<float>&, const Tensor<float>&);
template ad::Var<double> sample_with_noise<double>(const LatentPosterior<double>&, const Tensor<double>&);
template ad::Var<float> sample<float>(const LatentPosterior<float>&, std::mt19937_64&);
template ad::Var<double> sample<double>(const LatentPosterior<double>&, std::mt19937_64&);
template Tensor<float> standard_normal<float>(const Shape&, std::mt19937_64&);
template Tensor<double> standard_normal<double>(const Shape&, std::mt19937_64&);

}  // namespace uda
