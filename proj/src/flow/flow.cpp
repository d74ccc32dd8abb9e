#include "dyadflow/flow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dyadflow/rng.hpp"

namespace dyadflow::flow {

namespace ops = diff::ops;
using diff::AttentionMask;
using diff::Shape;

void FlowConfig::validate() const {
  if (layers == 0) throw ConfigError("flow.layers must be positive");
  if (heads == 0 || width % heads != 0) throw ConfigError("flow.width must be divisible by flow.heads");
  if ((width / heads) % 2 != 0) throw ConfigError("flow head dimension must be even");
  if (ffn_mult == 0) throw ConfigError("flow.ffn_mult must be positive");
  if (time_dim == 0 || time_dim % 2 != 0) throw ConfigError("flow.time_dim must be even and positive");
  if (p_drop < 0.0 || p_drop > 1.0) throw ConfigError("flow.p_drop must be in [0,1]");
  if (history_noise < 0.0) throw ConfigError("flow.history_noise must be >= 0");
  if (batch == 0) throw ConfigError("flow.batch must be positive");
}

template <typename T>
void FlowContext<T>::validate(std::size_t rate, std::size_t latent_dim, std::size_t audio_dim,
                              std::size_t vocab) const {
  const std::size_t frames = actor_audio.rows();
  if (actor_audio.rank() != 2 || partner_audio.rank() != 2) throw ContractError("audio streams must be L x d_a");
  if (partner_audio.rows() != frames) throw ContractError("actor and partner audio differ in length");
  if (actor_vad.size() != frames)
    throw ContractError("VAD has " + std::to_string(actor_vad.size()) + " frames, audio has " +
                        std::to_string(frames));
  if (actor_audio.cols() != audio_dim || partner_audio.cols() != audio_dim)
    throw ContractError("audio feature width mismatch");
  if (partner_latents.rank() != 2 || partner_latents.rows() != (frames + rate - 1) / rate ||
      partner_latents.cols() != latent_dim)
    throw ContractError("partner latents must be ceil(L/r) x D_v");
  if (text_token < 0 || std::size_t(text_token) >= vocab) throw ContractError("text token out of vocabulary");
}

std::vector<long> assign_timestamps(std::size_t audio_len, std::size_t motion_tokens, std::size_t rate) {
  std::vector<long> ts;
  ts.reserve(1 + 2 * audio_len + motion_tokens);
  ts.push_back(0);
  for (std::size_t i = 0; i < audio_len; ++i) ts.push_back(long(i));
  for (std::size_t j = 0; j < motion_tokens; ++j) ts.push_back(motion_timestamp(j, rate));
  for (std::size_t i = 0; i < audio_len; ++i) ts.push_back(long(i));
  return ts;
}

namespace {

std::string layer_name(std::size_t i) { return "b" + std::to_string(i); }

template <typename T>
void init_params(ParamStore<T>& s, const FlowConfig& c, std::size_t dv, std::size_t da, std::size_t vocab,
                 std::uint64_t seed) {
  auto rng = make_stream(seed, 0, "flow_init");
  const std::size_t d = c.width;
  s.add("text.embed", diff::truncated_normal<T>(Shape{vocab, d}, nn::kInitStd, rng));
  nn::init_linear(s, "audio.proj", da, d, rng);
  nn::init_linear(s, "motion.proj", dv, d, rng);
  for (const char* n : {"null.text", "null.partner_audio", "null.partner_motion", "null.actor_audio"})
    s.add(n, diff::truncated_normal<T>(Shape{1, d}, nn::kInitStd, rng));
  s.add("role", diff::truncated_normal<T>(Shape{std::size_t(Role::count), d}, nn::kInitStd, rng));
  nn::init_linear(s, "hist.in", dv, d, rng);
  nn::init_linear(s, "noisy.in", dv, d, rng);
  nn::init_linear(s, "time", c.time_dim, d, rng);
  const nn::BlockDims dims{d, c.heads, d * c.ffn_mult};
  for (std::size_t i = 0; i < c.layers; ++i) nn::init_block(s, layer_name(i), dims, rng);
  nn::init_layer_norm(s, "ln_out", d);
  nn::init_linear(s, "out", d, dv, rng);
}

// n copies of a 1 x D parameter row.
template <typename T>
Var<T> repeat_row(nn::Weights<T>& w, const std::string& name, std::size_t n) {
  return ops::matmul(w.tape().constant(Array<T>(Shape{n, 1}, T(1))), w(name));
}

}  // namespace

template <typename T>
FlowModel<T>::FlowModel(const FlowConfig& config, std::size_t latent_dim, std::size_t audio_dim,
                        std::size_t text_vocab, std::size_t rate, std::uint64_t seed)
    : config_(config), latent_dim_(latent_dim), audio_dim_(audio_dim), vocab_(text_vocab), rate_(rate) {
  config_.validate();
  if (latent_dim == 0 || audio_dim == 0 || text_vocab == 0 || rate == 0)
    throw ConfigError("flow model dimensions must be positive");
  init_params(params_, config_, latent_dim, audio_dim, text_vocab, seed);
}

template <typename T>
FlowModel<T>::FlowModel(const FlowConfig& config, std::size_t latent_dim, std::size_t audio_dim,
                        std::size_t text_vocab, std::size_t rate, ParamStore<T> params)
    : config_(config),
      latent_dim_(latent_dim),
      audio_dim_(audio_dim),
      vocab_(text_vocab),
      rate_(rate),
      params_(std::move(params)) {
  config_.validate();
}

template <typename T>
Var<T> FlowModel<T>::role(nn::Weights<T>& w, Role r) const {
  const auto i = static_cast<std::size_t>(r);
  return ops::slice(w("role"), i, i + 1);
}

template <typename T>
typename FlowModel<T>::Prefix FlowModel<T>::build_prefix(nn::Weights<T>& w, const FlowContext<T>& ctx,
                                                         const Dropout& drop) const {
  ctx.validate(rate_, latent_dim_, audio_dim_, vocab_);
  auto& tape = w.tape();
  const std::size_t frames = ctx.frames(), tokens = ctx.partner_latents.rows();
  auto text = text_embedding(w, ctx, drop);
  auto pa = drop.partner_audio ? repeat_row(w, "null.partner_audio", frames)
                               : nn::linear(w, "audio.proj", tape.constant(ctx.partner_audio));
  auto pm = drop.partner_motion ? repeat_row(w, "null.partner_motion", tokens)
                                : nn::linear(w, "motion.proj", tape.constant(ctx.partner_latents));
  auto aa = drop.actor_audio ? repeat_row(w, "null.actor_audio", frames)
                             : nn::linear(w, "audio.proj", tape.constant(ctx.actor_audio));
  auto tokens_var = ops::concat<T>({ops::add(text, role(w, Role::text)), ops::add(pa, role(w, Role::partner_audio)),
                                    ops::add(pm, role(w, Role::partner_motion)),
                                    ops::add(aa, role(w, Role::actor_audio))});
  return {tokens_var, assign_timestamps(frames, tokens, rate_)};
}

template <typename T>
Var<T> FlowModel<T>::text_embedding(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop) const {
  if (drop.text) return w("null.text");
  return ops::slice(w("text.embed"), std::size_t(ctx.text_token), std::size_t(ctx.text_token) + 1);
}

template <typename T>
Var<T> FlowModel<T>::embed_history(nn::Weights<T>& w, const Array<T>& rows, const Var<T>* text) const {
  if (rows.cols() != latent_dim_) throw DimensionError("history latent width mismatch");
  auto x = ops::add(nn::linear(w, "hist.in", w.tape().constant(rows)), role(w, Role::history));
  return config_.text_global && text ? ops::add(x, *text) : x;
}

template <typename T>
Var<T> FlowModel<T>::embed_noisy(nn::Weights<T>& w, const Array<T>& rows, const std::vector<T>& t,
                                 const Var<T>* text) const {
  if (rows.cols() != latent_dim_) throw DimensionError("noisy latent width mismatch");
  if (t.size() != rows.rows()) throw DimensionError("one flow time per noisy token required");
  for (T ti : t)
    if (!(ti >= T(0) && ti <= T(1))) throw ContractError("flow time must lie in [0,1]");
  auto& tape = w.tape();
  auto x = nn::linear(w, "noisy.in", tape.constant(rows));
  x = ops::add(x, nn::linear(w, "time", tape.constant(nn::sinusoidal_embedding(t, config_.time_dim))));
  x = ops::add(x, role(w, Role::noisy));
  return config_.text_global && text ? ops::add(x, *text) : x;
}

template <typename T>
Var<T> FlowModel<T>::head(nn::Weights<T>& w, Var<T> x) const {
  return nn::linear(w, "out", nn::layer_norm(w, "ln_out", x));
}

template <typename T>
Var<T> FlowModel<T>::velocity(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop,
                              const Array<T>* history, const Array<T>& noisy, const std::vector<T>& t) const {
  const std::size_t h = history ? history->rows() : 0, n = noisy.rows();
  if (n == 0 || n > h + 1) throw ContractError("noisy tokens need every earlier token in the history");
  auto prefix = build_prefix(w, ctx, drop);
  const std::size_t p = prefix.tokens.value().rows();
  std::vector<Var<T>> parts{prefix.tokens};
  const auto text = text_embedding(w, ctx, drop);
  if (h > 0) parts.push_back(embed_history(w, *history, &text));
  parts.push_back(embed_noisy(w, noisy, t, &text));
  auto x = ops::concat<T>(parts);

  auto ts = std::move(prefix.timestamps);
  for (std::size_t j = 0; j < h; ++j) ts.push_back(motion_timestamp(j, rate_));
  for (std::size_t l = 0; l < n; ++l) ts.push_back(motion_timestamp(l, rate_));

  AttentionMask mask;
  mask.n_keys = p + h + n;
  mask.rows.reserve(mask.n_keys);
  for (std::size_t i = 0; i < p; ++i) mask.rows.push_back({{0, p}});
  for (std::size_t j = 0; j < h; ++j) mask.rows.push_back({{0, p + j + 1}});
  for (std::size_t l = 0; l < n; ++l) {
    if (l == 0)
      mask.rows.push_back({{0, p}, {p + h, p + h + 1}});
    else
      mask.rows.push_back({{0, p + l}, {p + h + l, p + h + l + 1}});
  }
  for (std::size_t i = 0; i < config_.layers; ++i) x = nn::block(w, layer_name(i), x, ts, mask, config_.heads);
  return head(w, ops::slice(x, p + h, p + h + n));
}

template <typename T>
FlowTargets<T> make_flow_targets(const Array<T>& clean, const Array<T>& noise, const std::vector<T>& t) {
  if (clean.shape() != noise.shape()) throw DimensionError("noise must match the clean latents");
  if (t.size() != clean.rows()) throw DimensionError("one flow time per token required");
  FlowTargets<T> out{Array<T>(clean.shape()), Array<T>(clean.shape())};
  for (std::size_t l = 0; l < clean.rows(); ++l)
    for (std::size_t k = 0; k < clean.cols(); ++k) {
      out.state(l, k) = (T(1) - t[l]) * noise(l, k) + t[l] * clean(l, k);
      out.target(l, k) = clean(l, k) - noise(l, k);
    }
  return out;
}

template <typename T>
Var<T> FlowModel<T>::flow_loss(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop,
                               const Array<T>& clean, const Array<T>& noise, const std::vector<T>& t,
                               const Array<T>* history) const {
  auto [xt, target] = make_flow_targets(clean, noise, t);
  const std::size_t n = clean.rows(), d = clean.cols();
  std::optional<Array<T>> own;
  if (history) {
    if (history->rows() + 1 != n || history->cols() != d) throw DimensionError("history must be (n-1) x D_v");
  } else if (n > 1) {
    own.emplace(Shape{n - 1, d}, std::vector<T>(clean.values().begin(), clean.values().end() - d));
    history = &*own;
  }
  auto v = velocity(w, ctx, drop, n > 1 ? history : nullptr, xt, t);
  return ops::mse(v, w.tape().constant(std::move(target)));
}

template <typename T>
FlowSession<T>::FlowSession(const FlowModel<T>& model, const FlowContext<T>& ctx, const Dropout& drop)
    : model_(model), caches_(model.config().layers) {
  Tape<T> tape(false);
  nn::Weights<T> w(tape, model_.params());
  auto prefix = model_.build_prefix(w, ctx, drop);
  text_ = model_.text_embedding(w, ctx, drop).value();
  prefix_len_ = prefix.tokens.value().rows();
  const auto mask = AttentionMask::full(prefix_len_, prefix_len_);
  auto x = prefix.tokens;
  for (std::size_t i = 0; i < caches_.size(); ++i)
    x = nn::block_cached(w, layer_name(i), x, prefix.timestamps, mask, model_.config().heads, caches_[i], true);
}

template <typename T>
void FlowSession<T>::append(const Array<T>& latent) {
  if (latent.rows() != 1) throw DimensionError("append takes one latent token");
  Tape<T> tape(false);
  nn::Weights<T> w(tape, model_.params());
  const auto text = tape.constant(text_);
  auto x = model_.embed_history(w, latent, &text);
  const std::vector<long> ts{motion_timestamp(history_, model_.rate())};
  for (std::size_t i = 0; i < caches_.size(); ++i) {
    AttentionMask mask;
    mask.n_keys = caches_[i].rows + 1;
    mask.rows = {{{0, mask.n_keys}}};
    x = nn::block_cached(w, layer_name(i), x, ts, mask, model_.config().heads, caches_[i], true);
  }
  ++history_;
}

template <typename T>
Array<T> FlowSession<T>::velocity(const Array<T>& state, T t) const {
  if (state.rows() != 1) throw DimensionError("session velocity takes one latent token");
  Tape<T> tape(false);
  nn::Weights<T> w(tape, model_.params());
  const auto text = tape.constant(text_);
  auto x = model_.embed_noisy(w, state, {t}, &text);
  const std::vector<long> ts{motion_timestamp(history_, model_.rate())};
  for (std::size_t i = 0; i < caches_.size(); ++i) {
    AttentionMask mask;
    mask.n_keys = caches_[i].rows + 1;
    mask.rows = {{{0, mask.n_keys}}};
    auto& cache = const_cast<nn::KvCache<T>&>(caches_[i]);  // commit=false leaves it untouched
    x = nn::block_cached(w, layer_name(i), x, ts, mask, model_.config().heads, cache, false);
  }
  return model_.head(w, x).value();
}

template <typename T>
std::size_t FlowSession<T>::cache_bytes() const {
  std::size_t b = 0;
  for (const auto& c : caches_) b += c.bytes();
  return b;
}

template <typename T>
void train_flow(FlowModel<T>& model, const std::vector<FlowExample<T>>& corpus, std::uint64_t seed,
                const std::function<void(const FlowTrainLog&)>& on_epoch) {
  const auto& c = model.config();
  if (corpus.empty()) throw ContractError("flow training corpus is empty");
  auto rng = make_stream(seed, 0, "flow_train");
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = (corpus.size() + c.batch - 1) / c.batch;
  const std::size_t total_steps = std::max<std::size_t>(1, c.epochs * per_epoch);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_loss = 0.0, lr = c.lr;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += c.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + c.batch);
      auto& params = model.params();
      params.zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& ex = corpus[order[i]];
        Dropout drop;
        drop.text = ud(rng) < c.p_drop;
        drop.partner_audio = ud(rng) < c.p_drop;
        drop.partner_motion = ud(rng) < c.p_drop;
        drop.actor_audio = ud(rng) < c.p_drop;
        Array<T> noise(ex.latents.shape());
        for (auto& v : noise.values()) v = static_cast<T>(nd(rng));
        std::vector<T> t(ex.latents.rows());
        for (auto& ti : t) ti = static_cast<T>(ud(rng));
        std::optional<Array<T>> history;
        const std::size_t n = ex.latents.rows(), d = ex.latents.cols();
        if (c.history_noise > 0.0 && n > 1) {
          const double level = c.history_noise * ud(rng);
          history.emplace(Shape{n - 1, d});
          for (std::size_t i = 0; i < (n - 1) * d; ++i)
            (*history)[i] = ex.latents[i] + static_cast<T>(level * nd(rng));
        }
        Tape<T> tape;
        nn::Weights<T> w(tape, params);
        auto loss = model.flow_loss(w, ex.context, drop, ex.latents, noise, t, history ? &*history : nullptr);
        tape.backward(ops::scale(loss, T(1) / T(b1 - b0)));
        sum_loss += double(loss.value().item());
      }
      if (c.grad_clip > 0) params.clip_grad_norm(c.grad_clip);
      const double progress = double(step) / double(total_steps);
      lr = c.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
      diff::adamw_step(params, {.lr = lr, .weight_decay = c.weight_decay});
      ++step;
    }
    if (on_epoch) on_epoch({epoch, sum_loss / double(corpus.size()), lr, seed});
  }
}

#define DYADFLOW_FLOW_INSTANTIATE(T)                                                                     \
  template struct FlowContext<T>;                                                                        \
  template FlowTargets<T> make_flow_targets<T>(const Array<T>&, const Array<T>&, const std::vector<T>&); \
  template class FlowModel<T>;                                                                           \
  template class FlowSession<T>;                                                                         \
  template void train_flow<T>(FlowModel<T>&, const std::vector<FlowExample<T>>&, std::uint64_t,         \
                              const std::function<void(const FlowTrainLog&)>&);

DYADFLOW_FLOW_INSTANTIATE(float)
DYADFLOW_FLOW_INSTANTIATE(double)

}  // namespace dyadflow::flow
