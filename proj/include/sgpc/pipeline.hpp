#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>
#include <vector>

#include "sgpc/bitstream.hpp"
#include "sgpc/config.hpp"
#include "sgpc/metrics.hpp"
#include "sgpc/octree.hpp"
#include "sgpc/patching.hpp"

namespace sgpc {

/// Runs f(0..n-1) on up to `threads` workers. Results must go to per-index
/// slots; the lowest-index failure is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (i < failed_at) {
            failed_at = i;
            failure = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Model

struct LayerModel {
  EncoderConfig enc;
  DecoderConfig dec;
  nn::ParameterStore<float> store;
  std::vector<Vec3> coarse_init;
};

/// The four per-layer encoder/decoder pairs.
class Model {
 public:
  std::array<LayerModel, 4> layers;

  LayerModel& layer(int l) { return layers[static_cast<std::size_t>(l - 1)]; }
  const LayerModel& layer(int l) const { return layers[static_cast<std::size_t>(l - 1)]; }

  std::array<std::uint16_t, 4> latent_dims() const {
    std::array<std::uint16_t, 4> d{};
    for (std::size_t l = 0; l < 4; ++l) d[l] = static_cast<std::uint16_t>(layers[l].enc.d_z);
    return d;
  }

  /// Fresh parameters; layer l draws from mix64(seed, l).
  static Model create(const RunConfig& cfg, const SemanticClassTable& table, std::uint64_t seed) {
    cfg.validate();
    Model m;
    for (int l = 1; l <= 4; ++l) {
      auto& lm = m.layer(l);
      lm.enc = cfg.layer(l).enc;
      lm.enc.num_classes = std::max<std::size_t>(table.embedding_rows(), 1);
      lm.dec = cfg.layer(l).dec;
      const std::uint64_t s = mix64(seed, static_cast<std::uint64_t>(l));
      add_encoder_params(lm.store, lm.enc, s);
      add_decoder_params(lm.store, lm.enc, lm.dec, s);
      lm.coarse_init = sample_coarse_init(lm.dec.coarse, coarse_init_seed(l));
    }
    return m;
  }

  /// One SGWT checkpoint; parameter names carry an "l<k>/" prefix.
  std::vector<std::uint8_t> checkpoint(bool with_adam = true) const {
    nn::ParameterStore<float> all;
    for (int l = 1; l <= 4; ++l) {
      const auto& st = layer(l).store;
      const std::string prefix = "l" + std::to_string(l) + "/";
      for (const auto& [name, t] : st.params()) {
        all.add(prefix + name, t);
        if (auto it = st.moments().find(name); it != st.moments().end()) all.moments()[prefix + name] = it->second;
      }
      all.set_step(std::max(all.step(), st.step()));
    }
    return nn::encode_checkpoint(all, with_adam);
  }

  /// Builds the model for `cfg` and loads weights; any name or shape
  /// disagreement is a ConfigMismatch.
  static Model load(const RunConfig& cfg, const SemanticClassTable& table, std::span<const std::uint8_t> bytes) {
    Model m = create(cfg, table, 0);
    const auto all = nn::decode_checkpoint<float>(bytes);
    std::size_t used = 0;
    for (int l = 1; l <= 4; ++l) {
      auto& st = m.layer(l).store;
      const std::string prefix = "l" + std::to_string(l) + "/";
      for (auto& [name, t] : st.params()) {
        if (!all.contains(prefix + name)) throw ConfigMismatch("checkpoint lacks parameter '" + prefix + name + "'");
        const auto& src = all.at(prefix + name);
        if (src.shape != t.shape) {
          throw ConfigMismatch("checkpoint parameter '" + prefix + name + "' has shape " + nn::shape_str(src.shape) +
                               ", config expects " + nn::shape_str(t.shape));
        }
        t.data = src.data;
        if (auto it = all.moments().find(prefix + name); it != all.moments().end()) {
          st.moments()[name] = it->second;
        }
        ++used;
      }
      st.set_step(all.step());
    }
    if (used != all.params().size()) throw ConfigMismatch("checkpoint holds parameters the config does not define");
    return m;
  }
};

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double fine_cd = 0, coarse_cd = 0, density = 0, mask_fine = 0, mask_coarse = 0, total = 0;

  static std::string csv_header() { return "epoch,step,fine_cd,coarse_cd,density,mask_fine,mask_coarse,total"; }

  std::string csv_row() const {
    std::ostringstream o;
    o << std::setprecision(9) << epoch << ',' << step << ',' << fine_cd << ',' << coarse_cd << ',' << density << ','
      << mask_fine << ',' << mask_coarse << ',' << total;
    return o.str();
  }
};

struct TrainCallbacks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::size_t epoch, const Model&)> on_epoch;
};

namespace detail {

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  auto s = CounterRng(seed).stream();
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[s.below(i)]);
  return p;
}

}  // namespace detail

/// Steps per epoch follow the largest layer: ceil(max_l P_l / B). Every step
/// draws one batch per non-empty layer from that layer's epoch permutation
/// (wrapping around) and applies one Adam update per layer.
inline void train_model(Model& model, const std::array<std::vector<Patch>, 4>& patches, const TrainConfig& tc,
                        std::uint64_t seed, const TrainCallbacks& cb = {}) {
  std::size_t largest = 0;
  for (const auto& p : patches) largest = std::max(largest, p.size());
  if (largest == 0 && tc.epochs > 0) throw InputError("no patches to train on");
  for (int l = 1; l <= 4; ++l) {
    for (const auto& p : patches[static_cast<std::size_t>(l - 1)]) {
      if (p.layer != l) throw InputError("patch of layer " + std::to_string(p.layer) + " in layer " + std::to_string(l));
      if (p.capacity() != model.layer(l).dec.fine()) {
        throw ConfigMismatch("layer " + std::to_string(l) + " patch capacity " + std::to_string(p.capacity()) +
                             " differs from the decoder output " + std::to_string(model.layer(l).dec.fine()));
      }
    }
  }
  const std::size_t batch = tc.batch_size;
  const std::size_t steps_per_epoch = (largest + batch - 1) / batch;
  nn::AdamOptions opt;
  opt.lr = tc.lr;
  opt.weight_decay = tc.weight_decay;
  std::size_t global = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto w = schedule_lambdas(epoch, tc.lambda, tc.lambda_decay);
    std::array<std::vector<std::size_t>, 4> order;
    for (std::size_t l = 0; l < 4; ++l) order[l] = detail::permutation(patches[l].size(), mix64(seed, 0x5045524Dull, epoch, l));
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global) {
      StepLog log;
      log.epoch = epoch;
      log.step = global;
      std::size_t count = 0;
      for (int l = 1; l <= 4; ++l) {
        const auto& lp = patches[static_cast<std::size_t>(l - 1)];
        if (lp.empty()) continue;
        auto& lm = model.layer(l);
        lm.store.zero_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& patch = lp[order[static_cast<std::size_t>(l - 1)][(s * batch + b) % lp.size()]];
          nn::Tape<float> tape(true, mix64(seed, global, static_cast<std::uint64_t>(l), b));
          auto z = encode_graph(tape, lm.store, lm.enc, patch);
          auto g = decode_graph(tape, lm.store, lm.dec, z, lm.coarse_init);
          auto terms = total_loss(tape, patch, g, lm.dec, w, tc.density);
          log.fine_cd += terms.fine_cd.item();
          log.coarse_cd += terms.coarse_cd.item();
          log.density += terms.density.item();
          log.mask_fine += terms.mask_fine.item();
          log.mask_coarse += terms.mask_coarse.item();
          log.total += terms.total.item();
          ++count;
          tape.backward(nn::scale(terms.total, 1.0f / static_cast<float>(batch)));
        }
        nn::adam_step(lm.store, opt);
      }
      for (double* v : {&log.fine_cd, &log.coarse_cd, &log.density, &log.mask_fine, &log.mask_coarse, &log.total}) {
        *v /= static_cast<double>(count);
      }
      if (cb.on_step) cb.on_step(log);
    }
    if (cb.on_epoch) cb.on_epoch(epoch, model);
  }
}

inline std::array<std::vector<Patch>, 4> patches_by_layer(const std::vector<Patch>& all) {
  std::array<std::vector<Patch>, 4> out;
  for (const auto& p : all) out[static_cast<std::size_t>(p.layer - 1)].push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Codec

struct EncodeResult {
  SceneGraph graph;
  EncodedScene scene;
  std::size_t patch_count = 0;
};

inline EncodeResult encode_scene(Model& model, const LabeledPointCloud& cloud, const SemanticClassTable& table,
                                 const RunConfig& cfg, std::uint32_t frame_id = 0, std::size_t threads = 1) {
  cloud.validate();
  if (cloud.size() > 0xFFFFFFFFull) throw InputError("point count exceeds the stream's 32-bit field");
  EncodeResult r;
  r.graph = build_scene_graph(cloud, table, cfg.graph, frame_id);
  const auto patches = make_patches(cloud, r.graph, cfg.capacities());
  r.patch_count = patches.size();
  std::vector<Latent> latents(patches.size());
  parallel_for(patches.size(), threads, [&](std::size_t i) {
    auto& lm = model.layer(patches[i].layer);
    latents[i] = encode_patch(patches[i], lm.enc, lm.store);
  });

  std::vector<std::uint32_t> parent(r.graph.nodes.size(), kNoParent);
  for (const auto& e : r.graph.edges) parent[e.node] = e.terrain;
  auto& sc = r.scene;
  sc.frame_id = frame_id;
  sc.original_points = static_cast<std::uint32_t>(cloud.size());
  sc.d_z = model.latent_dims();
  std::size_t next = 0;
  for (const auto& node : r.graph.nodes) {
    EncodedNode en;
    en.id = node.id;
    en.layer = static_cast<std::uint8_t>(node.layer);
    en.class_id = node.class_id;
    en.parent = parent[node.id];
    en.box = pack_box(node.obb);
    while (next < patches.size() && patches[next].node_id == node.id) {
      EncodedCell cell;
      if (node.layer == kTerrain) cell.box = pack_box(patches[next].obb);
      cell.n_valid = static_cast<std::uint16_t>(patches[next].n_valid);
      cell.latent = latents[next].values;
      en.cells.push_back(std::move(cell));
      ++next;
    }
    if (node.layer != kTerrain && en.cells.size() != 1) continue;  // memberless nodes carry nothing
    sc.nodes.push_back(std::move(en));
  }
  return r;
}

/// Decodes every latent, keeps points with confidence >= 0.5 and labels them
/// with their node's class.
inline LabeledPointCloud decode_scene(Model& model, const EncodedScene& scene, std::size_t threads = 1) {
  if (scene.d_z != model.latent_dims()) {
    std::ostringstream o;
    o << "stream latent dims " << scene.d_z[0] << ',' << scene.d_z[1] << ',' << scene.d_z[2] << ',' << scene.d_z[3]
      << " differ from the model's " << model.latent_dims()[0] << ',' << model.latent_dims()[1] << ','
      << model.latent_dims()[2] << ',' << model.latent_dims()[3];
    throw ConfigMismatch(o.str());
  }
  struct Job {
    const EncodedNode* node;
    const EncodedCell* cell;
  };
  std::vector<Job> jobs;
  for (const auto& n : scene.nodes) {
    for (const auto& c : n.cells) jobs.push_back({&n, &c});
  }
  std::vector<std::vector<Vec3>> parts(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const auto& [node, cell] = jobs[i];
    auto& lm = model.layer(node->layer);
    const Obb box = unpack_box(node->layer == kTerrain ? cell->box : node->box);
    Latent z{cell->latent, node->layer};
    parts[i] = decode_patch(z, box, lm.enc, lm.dec, lm.store).pruned(0.5);
  });
  LabeledPointCloud out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    for (const auto& p : parts[i]) out.push_back(p, jobs[i].node->class_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rate-distortion sweep

struct BenchRow {
  std::string scene;
  std::string codec;
  std::string setting;
  MetricsReport report;
};

inline std::string bench_csv_header() { return "scene,codec,setting,bpp,d_cd,d_perp,iou"; }

inline std::string bench_csv_row(const BenchRow& r) {
  std::ostringstream o;
  o << std::setprecision(10) << r.scene << ',' << r.codec << ',' << r.setting << ',' << r.report.bpp << ','
    << r.report.d_cd << ',' << r.report.d_perp << ',' << r.report.iou;
  return o.str();
}

struct BenchScene {
  std::string name;
  LabeledPointCloud cloud;
};

/// Learned codec at each release d_z (trained for cfg.bench_epochs on the
/// given scenes), then the octree baseline at each configured depth.
inline std::vector<BenchRow> run_bench(const RunConfig& cfg, const SemanticClassTable& table,
                                       const std::vector<BenchScene>& scenes, std::size_t threads = 1) {
  if (scenes.empty()) throw InputError("bench needs at least one scene");
  std::vector<std::vector<BenchRow>> per_scene(scenes.size());
  std::vector<std::vector<Patch>> scene_patches;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto g = build_scene_graph(scenes[s].cloud, table, cfg.graph, static_cast<std::uint32_t>(s));
    scene_patches.push_back(make_patches(scenes[s].cloud, g, cfg.capacities()));
  }
  for (std::size_t d : kReleaseLatentDims) {
    RunConfig c = cfg;
    c.set_latent_dims(d);
    Model model = Model::create(c, table, c.seed);
    if (c.bench_epochs > 0) {
      std::vector<Patch> all;
      for (const auto& sp : scene_patches) all.insert(all.end(), sp.begin(), sp.end());
      TrainConfig tc = c.train;
      tc.epochs = c.bench_epochs;
      train_model(model, patches_by_layer(all), tc, c.seed);
    }
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      const auto enc = encode_scene(model, scenes[s].cloud, table, c, static_cast<std::uint32_t>(s), threads);
      const auto bytes = serialize(enc.scene, c.precision);
      const auto rec = decode_scene(model, enc.scene, threads);
      if (rec.empty()) throw Error("learned codec pruned every point at d_z " + std::to_string(d));
      per_scene[s].push_back({scenes[s].name, "learned", "d_z=" + std::to_string(d), evaluate(scenes[s].cloud, rec, bytes.size())});
    }
  }
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (int depth : cfg.octree_depths) {
      const auto bytes = octree_encode(scenes[s].cloud, depth);
      LabeledPointCloud rec;
      for (const auto& p : octree_decode(bytes)) rec.push_back(p, 0);
      per_scene[s].push_back({scenes[s].name, "octree", "depth=" + std::to_string(depth),
                              evaluate(scenes[s].cloud, rec, bytes.size())});
    }
  }
  std::vector<BenchRow> rows;
  for (auto& v : per_scene) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

}  // namespace sgpc
