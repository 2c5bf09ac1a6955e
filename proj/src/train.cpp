#include <algorithm>
#include <cmath>
#include <numeric>

#include "quantlens/nn.hpp"

namespace quantlens {

void TrainConfig::validate() const {
  if (epochs == 0) fail(ErrorCode::Config, "epochs must be >= 1");
  if (batch_size == 0) fail(ErrorCode::Config, "batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorCode::Config, "learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorCode::Config, "momentum must be in [0, 1)");
  if (!(decay > 0.0 && decay < 1.0)) fail(ErrorCode::Config, "decay factor must be in (0, 1)");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] >= epochs) fail(ErrorCode::Config, "milestones must be < epochs");
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      fail(ErrorCode::Config, "milestones must be strictly increasing");
    }
  }
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  for (std::size_t m : milestones) {
    if (m < epoch) lr *= decay;
  }
  return lr;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},       {"batch_size", cfg.batch_size},
          {"momentum", cfg.momentum},   {"learning_rate", cfg.learning_rate},
          {"milestones", cfg.milestones}, {"decay", cfg.decay},
          {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::Config, "train config must be an object");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.milestones = j.value("milestones", c.milestones);
  c.decay = j.value("decay", c.decay);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string_view train_status_name(TrainStatus s) {
  switch (s) {
    case TrainStatus::Trained: return "trained";
    case TrainStatus::Exploded: return "exploded";
    case TrainStatus::Vanished: return "vanished";
  }
  return "unknown";
}

TrainStatus parse_train_status(std::string_view name) {
  if (name == "trained") return TrainStatus::Trained;
  if (name == "exploded") return TrainStatus::Exploded;
  if (name == "vanished") return TrainStatus::Vanished;
  fail(ErrorCode::Config, "unknown status '" + std::string(name) + "'");
}

std::size_t argmax_row(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

namespace {

struct Velocity {
  TensorF weight, bias, gamma, beta;
};

void momentum_step(TensorF& param, TensorF& velocity, const TensorF& grad, float mu, float lr) {
  if (grad.empty()) return;
  if (velocity.empty()) velocity = TensorF(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mu * velocity[i] - lr * grad[i];
    param[i] += velocity[i];
  }
}

std::string first_nonfinite_gradient(const NetworkF& net, const Gradients<float>& g) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerGradients<float>& lg = g.layers[i];
    for (const TensorF* t : {&lg.weight, &lg.bias, &lg.gamma, &lg.beta}) {
      if (!t->all_finite()) return "layer " + std::to_string(i) + " (" + net.layers[i].spec.name + ")";
    }
  }
  return {};
}

}  // namespace

TrainLog train(NetworkF& net, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (data.size() == 0) fail(ErrorCode::EmptyInput, "training set is empty");
  const SeededRng root(cfg.seed);
  std::vector<Velocity> velocity(net.layers.size());
  TrainLog log;
  const float mu = static_cast<float>(cfg.momentum);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    SeededRng shuffle_rng = root.substream("shuffle/" + std::to_string(epoch));
    SeededRng augment_rng = root.substream("augment/" + std::to_string(epoch));
    const std::vector<std::size_t> order = permutation(shuffle_rng, data.size());

    EpochLog entry;
    entry.epoch = epoch;
    entry.learning_rate = lr;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    bool conv_grads_vanished = true;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      TensorF x = data.batch_images(idx);
      std::vector<std::uint8_t> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(data.labels[i]);
      if (hooks.augment) hooks.augment(x, augment_rng);

      ForwardResult<float> fwd;
      try {
        fwd = forward(net, x, Mode::Train);
      } catch (const NumericError& e) {
        log.status = TrainStatus::Exploded;
        log.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
        return log;
      }
      Gradients<float> g = backward(net, fwd, labels);
      if (!std::isfinite(g.loss)) {
        log.status = TrainStatus::Exploded;
        log.diagnostic = "epoch " + std::to_string(epoch) + ": non-finite loss";
        return log;
      }
      if (const std::string bad = first_nonfinite_gradient(net, g); !bad.empty()) {
        log.status = TrainStatus::Exploded;
        log.diagnostic = "epoch " + std::to_string(epoch) + ": non-finite gradient at " + bad;
        return log;
      }
      loss_sum += g.loss * static_cast<double>(idx.size());
      const std::size_t classes = fwd.logits.size() / idx.size();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::span<const float> row(fwd.logits.data() + r * classes, classes);
        if (argmax_row(row) == labels[r]) ++correct;
      }
      for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (!is_conv(net.layers[i].spec.kind)) continue;
        entry.max_conv_grad_norm = std::max(entry.max_conv_grad_norm, g.layers[i].weight_norm);
        if (g.layers[i].weight_norm >= kVanishingGradNorm) conv_grads_vanished = false;
      }
      const float step = static_cast<float>(lr);
      for (std::size_t i = 0; i < net.layers.size(); ++i) {
        LayerF& layer = net.layers[i];
        momentum_step(layer.weight, velocity[i].weight, g.layers[i].weight, mu, step);
        momentum_step(layer.bias, velocity[i].bias, g.layers[i].bias, mu, step);
        momentum_step(layer.gamma, velocity[i].gamma, g.layers[i].gamma, mu, step);
        momentum_step(layer.beta, velocity[i].beta, g.layers[i].beta, mu, step);
      }
    }

    entry.loss = loss_sum / static_cast<double>(data.size());
    entry.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    log.epochs.push_back(entry);
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, net, entry);
    if (conv_grads_vanished) {
      log.status = TrainStatus::Vanished;
      log.diagnostic = "epoch " + std::to_string(epoch) +
                       ": every conv-layer gradient norm stayed below 1e-12";
      return log;
    }
  }
  return log;
}

TensorF predict_logits(const NetworkF& net, const TensorF& images, std::size_t batch_size,
                       const LayerObserver<float>& observer) {
  const std::size_t n = images.dim(0);
  if (n == 0) fail(ErrorCode::EmptyInput, "no images");
  const std::size_t per = images.size() / n;
  TensorF out;
  std::size_t classes = 0;
  ForwardOptions<float> opts;
  opts.keep_activations = false;
  opts.observer = observer;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    Shape shape = images.shape();
    shape[0] = end - start;
    TensorF batch(shape, std::vector<float>(images.data() + start * per, images.data() + end * per));
    ForwardResult<float> r = forward(net, batch, opts);
    if (out.empty()) {
      classes = r.logits.size() / (end - start);
      out = TensorF({n, classes});
    }
    std::copy(r.logits.data(), r.logits.data() + r.logits.size(), out.data() + start * classes);
  }
  return out;
}

double evaluate_accuracy(const NetworkF& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) fail(ErrorCode::EmptyInput, "evaluation set is empty");
  const TensorF logits = predict_logits(net, data.images, batch_size);
  const std::size_t classes = logits.size() / data.size();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    std::span<const float> row(logits.data() + r * classes, classes);
    if (argmax_row(row) == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace quantlens
