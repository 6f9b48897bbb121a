#include "evc/mask_decay.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "json.hpp"

namespace evc {

SparsityKind parse_sparsity_kind(const std::string& name) {
  std::string k = name;
  std::transform(k.begin(), k.end(), k.begin(), [](unsigned char c) { return std::tolower(c); });
  if (k == "ours") return SparsityKind::kOurs;
  if (k == "l1") return SparsityKind::kL1;
  if (k == "l2") return SparsityKind::kL2;
  throw ValidationError("unknown sparsity kind '" + name + "' (expected ours, l1 or l2)");
}

const char* sparsity_kind_name(SparsityKind k) {
  switch (k) {
    case SparsityKind::kOurs: return "ours";
    case SparsityKind::kL1: return "l1";
    case SparsityKind::kL2: return "l2";
  }
  return "?";
}

namespace {

std::atomic<bool> warned_negative{false};

double clamp_for_ours(double x) {
  if (x < 0.0) {
    if (!warned_negative.exchange(true)) {
      std::cerr << "warning: negative mask value " << x << " clamped to 0 in sparsity loss\n";
    }
    return 0.0;
  }
  return x;
}

}  // namespace

double sparsity_loss(double x, SparsityKind kind) {
  switch (kind) {
    case SparsityKind::kOurs:
      x = clamp_for_ours(x);
      return x <= 1.0 ? -0.5 * x * x + x : 0.5 * x * x - x + 1.0;
    case SparsityKind::kL1: return std::abs(x);
    case SparsityKind::kL2: return 0.5 * x * x;
  }
  return 0.0;
}

double sparsity_grad(double x, SparsityKind kind) {
  switch (kind) {
    case SparsityKind::kOurs: return std::abs(clamp_for_ours(x) - 1.0);
    case SparsityKind::kL1: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    case SparsityKind::kL2: return x;
  }
  return 0.0;
}

void DecayConfig::validate() const {
  if (!(eta > 0.0)) throw ValidationError("decay rate eta must be > 0");
  if (avoid_rate() < eta) throw ValidationError("eta_avoid must be >= eta");
  if (!(zero_threshold >= 0.0)) throw ValidationError("zero_threshold must be >= 0");
}

template <typename T>
bool decay_step(MaskLayer<T>& mask, const DecayConfig& cfg, std::span<const double> task_grad, double gamma,
                AuditLog* log, const std::string& label) {
  if (mask.frozen) {
    if (log) log->record("skip frozen " + label);
    return false;
  }
  const int n = mask.size();
  if (!task_grad.empty() && static_cast<int>(task_grad.size()) != n) {
    throw DimensionError("decay_step: task gradient length " + std::to_string(task_grad.size()) +
                         " != mask size " + std::to_string(n));
  }
  auto& m = mask.m->value;
  for (int i = 0; i < n; ++i) {
    const double x = m[i];
    const double rate = mask.avoid.count(i) ? cfg.avoid_rate() : cfg.eta;
    double next = x - rate * sparsity_grad(x, cfg.kind);
    if (!task_grad.empty()) next -= gamma * task_grad[i];
    if (cfg.clamp_at_zero) next = std::max(next, 0.0);
    m[i] = static_cast<T>(next);
  }
  if (log) log->record("decay " + label);
  return true;
}

namespace {

// Indices of the k largest |m|, ties to the lower index, returned sorted.
template <typename T>
std::vector<int> top_k(const MaskLayer<T>& mask, int k) {
  std::vector<int> idx(mask.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto& m = mask.m->value;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return std::abs(m[a]) > std::abs(m[b]); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
void freeze_to(MaskLayer<T>& mask, long iteration) {
  mask.survivors = top_k(mask, mask.target);
  std::vector<bool> keep(mask.size(), false);
  for (int i : mask.survivors) keep[i] = true;
  for (int i = 0; i < mask.size(); ++i) {
    if (!keep[i]) mask.m->value[i] = T(0);
  }
  mask.frozen = true;
  mask.freeze_iteration = iteration;
}

}  // namespace

template <typename T>
bool check_sparse_enough(MaskLayer<T>& mask, const DecayConfig& cfg, long iteration) {
  if (mask.frozen) return false;
  if (mask.target < 0 || mask.target > mask.size()) throw ValidationError("mask target outside [0, N2]");
  int alive = 0;
  for (T v : mask.m->value.values()) {
    if (std::abs(static_cast<double>(v)) > cfg.zero_threshold) ++alive;
  }
  if (alive > mask.target) return false;
  freeze_to(mask, iteration);
  return true;
}

template <typename T>
void force_freeze(MaskLayer<T>& mask, long iteration) {
  if (mask.frozen) return;
  freeze_to(mask, iteration);
}

template <typename T>
void insert_masks(Network<T>& net, const ChannelScheme& student) {
  if (net.masked()) throw SequencingError("network already carries masks");
  const int n = static_cast<int>(net.stages.size());
  auto add = [&](int size, int target, int stage, MaskSite site) {
    MaskLayer<T> m;
    m.m = make_var(TensorT<T>(Shape(1, size, 1, 1), T(1)), true);
    m.target = target;
    m.stage = stage;
    m.site = site;
    net.masks.push_back(std::move(m));
    return static_cast<int>(net.masks.size()) - 1;
  };
  for (int i = 0; i < n; ++i) {
    const int teacher_w = net.stages[i].dc.conv1.out_channels();
    const int student_w = student.widths[net.decoder ? n - 1 - i : i];
    if (student_w < 1 || student_w > teacher_w) {
      throw ValidationError("student width " + std::to_string(student_w) + " at stage " + std::to_string(i) +
                            " must be in [1, " + std::to_string(teacher_w) + "]");
    }
  }
  for (int i = 0; i < n; ++i) {
    auto& st = net.stages[i];
    const int w = st.dc.conv1.out_channels();
    const int s = student.widths[net.decoder ? n - 1 - i : i];
    st.res.inner_mask = add(w, s, i, MaskSite::kResidualInner);
    const int out = add(w, s, i, MaskSite::kStageOutput);
    st.res.out_mask = out;
    st.dc.out_mask = out;
    st.dc.inner_mask = add(w, s, i, MaskSite::kDepthInner);
    st.dc.expand_mask = add(4 * w, 4 * s, i, MaskSite::kDepthExpand);
  }
}

PruneTarget parse_prune_target(const std::string& name) {
  if (name == "encoder") return PruneTarget::kEncoder;
  if (name == "decoder") return PruneTarget::kDecoder;
  if (name == "both") return PruneTarget::kBoth;
  throw ValidationError("unknown prune target '" + name + "' (expected encoder, decoder or both)");
}

template <typename T>
void insert_masks(CodecModel<T>& model, const ChannelScheme& enc_student, const ChannelScheme& dec_student,
                  PruneTarget which) {
  if (which != PruneTarget::kDecoder) insert_masks(model.encoder, enc_student);
  if (which != PruneTarget::kEncoder) insert_masks(model.decoder, dec_student);
}

namespace {

// Channel selection plus per-channel factors for one mask (all-ones and
// keep-everything when the site has no mask).
struct Keep {
  std::vector<int> idx;
  std::vector<double> scale;
};

template <typename T>
Keep keep_of(const Network<T>& net, int mask_index, int size) {
  Keep k;
  if (mask_index < 0) {
    k.idx.resize(size);
    std::iota(k.idx.begin(), k.idx.end(), 0);
    k.scale.assign(size, 1.0);
    return k;
  }
  const auto& m = net.masks[mask_index];
  if (!m.frozen) throw SequencingError("merge_masks: mask " + m.label(net.decoder) + " is not frozen");
  if (m.size() != size) throw StructuralError("merge_masks: mask size does not match its layer");
  k.idx = m.survivors;
  if (k.idx.empty()) throw StructuralError("merge_masks: mask " + m.label(net.decoder) + " keeps no channels");
  for (int i : k.idx) {
    const double v = m.m->value[i];
    // Folding through LeakyReLU relies on f(a x) = a f(x), valid for a >= 0 only.
    if (v < 0.0) throw StructuralError("merge_masks: negative mask value in " + m.label(net.decoder));
    k.scale.push_back(v);
  }
  return k;
}

// Expands channel selection to the pre-shuffle rows c*r^2 .. c*r^2 + r^2 - 1.
Keep expand_for_shuffle(const Keep& k, int shuffle) {
  if (shuffle <= 1) return k;
  const int r2 = shuffle * shuffle;
  Keep out;
  for (std::size_t i = 0; i < k.idx.size(); ++i)
    for (int j = 0; j < r2; ++j) {
      out.idx.push_back(k.idx[i] * r2 + j);
      out.scale.push_back(k.scale[i]);
    }
  return out;
}

// New conv keeping output rows `rows` (each row and its bias scaled) and input
// columns `cols` (each scaled). Grouped convs are handled by dw_select.
template <typename T>
ConvLayer<T> select(const ConvLayer<T>& c, const Keep& rows, const Keep& cols) {
  if (c.spec.groups != 1) throw StructuralError("select: grouped convolution");
  const TensorT<T>& w = c.weight->value;
  const int k = w.h();
  TensorT<T> nw(Shape(static_cast<int>(rows.idx.size()), static_cast<int>(cols.idx.size()), k, k));
  TensorT<T> nb(Shape(1, static_cast<int>(rows.idx.size()), 1, 1));
  for (std::size_t o = 0; o < rows.idx.size(); ++o) {
    const int ro = rows.idx[o];
    nb[o] = static_cast<T>(c.bias->value[ro] * rows.scale[o]);
    for (std::size_t i = 0; i < cols.idx.size(); ++i) {
      const double f = rows.scale[o] * cols.scale[i];
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
          nw.at(static_cast<int>(o), static_cast<int>(i), y, x) = static_cast<T>(w.at(ro, cols.idx[i], y, x) * f);
        }
    }
  }
  ConvLayer<T> out;
  out.weight = make_var(std::move(nw), c.weight->requires_grad);
  out.bias = make_var(std::move(nb), c.bias->requires_grad);
  out.spec = c.spec;
  out.shuffle = c.shuffle;
  return out;
}

// Depthwise conv restricted to `ch`, with each channel's input scaled (weights
// only; the bias is added after the convolution).
template <typename T>
ConvLayer<T> dw_select(const ConvLayer<T>& c, const Keep& ch) {
  const TensorT<T>& w = c.weight->value;
  const int k = w.h();
  const int n = static_cast<int>(ch.idx.size());
  TensorT<T> nw(Shape(n, 1, k, k));
  TensorT<T> nb(Shape(1, n, 1, 1));
  for (int o = 0; o < n; ++o) {
    nb[o] = c.bias->value[ch.idx[o]];
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) nw.at(o, 0, y, x) = static_cast<T>(w.at(ch.idx[o], 0, y, x) * ch.scale[o]);
  }
  ConvLayer<T> out;
  out.weight = make_var(std::move(nw), c.weight->requires_grad);
  out.bias = make_var(std::move(nb), c.bias->requires_grad);
  out.spec = c.spec;
  out.spec.groups = n;
  out.shuffle = c.shuffle;
  return out;
}

Keep unscaled(const Keep& k) {
  Keep out = k;
  std::fill(out.scale.begin(), out.scale.end(), 1.0);
  return out;
}

Keep all_of(int n) {
  Keep k;
  k.idx.resize(n);
  std::iota(k.idx.begin(), k.idx.end(), 0);
  k.scale.assign(n, 1.0);
  return k;
}

// A dropped depth-inner channel still emits its depthwise bias as a constant
// plane; the 1x1 Conv#3 turns that into a bias shift.
template <typename T>
void fold_dropped_dw_bias(ConvLayer<T>& conv3, const DepthConvBlock<T>& dc, const Keep& dinner, const Keep& expand) {
  const auto& w3 = dc.conv3.weight->value;
  if (w3.h() != 1 || w3.w() != 1) throw StructuralError("merge_masks: depth-conv Conv#3 must be 1x1");
  std::vector<bool> kept(dc.dw.out_channels(), false);
  for (int i : dinner.idx) kept[i] = true;
  for (std::size_t o = 0; o < expand.idx.size(); ++o) {
    double shift = 0.0;
    for (int c = 0; c < dc.dw.out_channels(); ++c) {
      if (!kept[c]) shift += static_cast<double>(w3.at(expand.idx[o], c, 0, 0)) * dc.dw.bias->value[c];
    }
    conv3.bias->value[o] = static_cast<T>(conv3.bias->value[o] + shift);
  }
}

}  // namespace

template <typename T>
Network<T> merge_masks(const Network<T>& net) {
  for (const auto& m : net.masks) {
    if (!m.frozen) throw SequencingError("merge_masks: mask " + m.label(net.decoder) + " is not frozen");
  }
  Network<T> out;
  out.decoder = net.decoder;
  out.negative_slope = net.negative_slope;
  // Channels of the current stage input that survive (already carrying any
  // folded mask factors from the producer side).
  Keep in = all_of(net.stages.empty() ? net.head.in_channels() : net.stages[0].res.conv1.in_channels());
  for (const auto& st : net.stages) {
    const int w = st.dc.conv1.out_channels();
    const Keep inner = keep_of(net, st.res.inner_mask, w);
    const Keep outk = keep_of(net, st.res.out_mask, w);
    if (st.dc.out_mask != st.res.out_mask) throw StructuralError("merge_masks: stage output masks are not shared");
    const Keep dinner = keep_of(net, st.dc.inner_mask, w);
    const Keep expand = keep_of(net, st.dc.expand_mask, 4 * w);
    const int r = st.res.conv2.shuffle;

    Stage<T> ns;
    ns.res.conv1 = select(st.res.conv1, unscaled(inner), unscaled(in));
    ns.res.conv2 = select(st.res.conv2, expand_for_shuffle(outk, r), inner);
    ns.res.conv3 = select(st.res.conv3, expand_for_shuffle(outk, r), unscaled(in));
    ns.dc.conv1 = select(st.dc.conv1, unscaled(dinner), unscaled(outk));
    ns.dc.dw = dw_select(st.dc.dw, dinner);
    ns.dc.conv3 = select(st.dc.conv3, unscaled(expand), unscaled(dinner));
    fold_dropped_dw_bias(ns.dc.conv3, st.dc, dinner, expand);
    ns.dc.conv4 = select(st.dc.conv4, outk, expand);
    out.stages.push_back(std::move(ns));
    in = unscaled(outk);
  }
  out.head = select(net.head, all_of(net.head.out_channels()), in);
  return out;
}

template <typename T>
void merge_masks(CodecModel<T>& model) {
  if (model.encoder.masked()) {
    model.encoder = merge_masks(model.encoder);
    model.config.encoder = model.encoder.scheme();
  }
  if (model.decoder.masked()) {
    model.decoder = merge_masks(model.decoder);
    model.config.decoder = model.decoder.scheme();
  }
}

template <typename T>
void enforce_mask_constraints(Network<T>& net, const DecayConfig& cfg) {
  for (auto& m : net.masks) {
    auto& v = m.m->value;
    if (m.frozen) {
      std::vector<bool> keep(m.size(), false);
      for (int i : m.survivors) keep[i] = true;
      for (int i = 0; i < m.size(); ++i) {
        if (!keep[i]) v[i] = T(0);
      }
    }
    if (cfg.clamp_at_zero) {
      for (auto& e : v.values()) e = std::max(e, T(0));
    }
  }
}

template <typename T>
std::vector<ChosenChannels> record_chosen_channels(const Network<T>& net) {
  std::vector<ChosenChannels> out;
  for (const auto& m : net.masks) {
    ChosenChannels c;
    c.label = m.label(net.decoder);
    c.site = mask_site_name(m.site);
    c.stage = m.stage;
    c.size = m.size();
    c.target = m.target;
    c.freeze_iteration = m.freeze_iteration;
    if (m.frozen) {
      c.survivors = m.survivors;
    } else {
      for (int i = 0; i < m.size(); ++i) {
        if (m.m->value[i] != T(0)) c.survivors.push_back(i);
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

void write_prune_report(const std::filesystem::path& path, const std::vector<ChosenChannels>& masks) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : masks) {
    j.push_back({{"label", m.label},
                 {"site", m.site},
                 {"stage", m.stage},
                 {"n2", m.size},
                 {"ns", m.target},
                 {"survivors", m.survivors},
                 {"freeze_iteration", m.freeze_iteration}});
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write prune report " + path.string());
  f << j.dump(2) << "\n";
}

std::vector<ChosenChannels> read_prune_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read prune report " + path.string());
  const auto j = nlohmann::json::parse(f);
  std::vector<ChosenChannels> out;
  for (const auto& e : j) {
    ChosenChannels c;
    c.label = e.at("label").get<std::string>();
    c.site = e.at("site").get<std::string>();
    c.stage = e.at("stage").get<int>();
    c.size = e.at("n2").get<int>();
    c.target = e.at("ns").get<int>();
    c.survivors = e.at("survivors").get<std::vector<int>>();
    c.freeze_iteration = e.at("freeze_iteration").get<long>();
    out.push_back(std::move(c));
  }
  return out;
}

double overlap_ratio(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> sa = a, sb = b, inter, uni;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

#define EVC_INSTANTIATE(T)                                                                                   \
  template bool decay_step(MaskLayer<T>&, const DecayConfig&, std::span<const double>, double, AuditLog*,   \
                           const std::string&);                                                              \
  template bool check_sparse_enough(MaskLayer<T>&, const DecayConfig&, long);                                \
  template void force_freeze(MaskLayer<T>&, long);                                                           \
  template void insert_masks(Network<T>&, const ChannelScheme&);                                             \
  template void insert_masks(CodecModel<T>&, const ChannelScheme&, const ChannelScheme&, PruneTarget);       \
  template Network<T> merge_masks(const Network<T>&);                                                        \
  template void merge_masks(CodecModel<T>&);                                                                 \
  template void enforce_mask_constraints(Network<T>&, const DecayConfig&);                                   \
  template std::vector<ChosenChannels> record_chosen_channels(const Network<T>&);

EVC_INSTANTIATE(float)
EVC_INSTANTIATE(double)
#undef EVC_INSTANTIATE

}  // namespace evc
