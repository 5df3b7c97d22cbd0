#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sgpc/pipeline.hpp"

namespace sgpc::cli {

enum ExitCode : int { kOk = 0, kBadInput = 2, kFormat = 3, kMismatch = 4 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool json = false;
};

namespace detail {

template <typename F>
auto at_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path + ": " + e.what());
  } catch (const ConfigMismatch& e) {
    throw ConfigMismatch(path + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline LabeledPointCloud read_cloud(const std::string& path) {
  return at_path(path, [&] {
    auto c = load_cloud(path);
    c.validate();
    return c;
  });
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw InputError("failed writing '" + path + "'");
}

struct Context {
  RunConfig cfg;
  SemanticClassTable table;
  std::uint64_t seed = 0;
};

inline Context context(const GlobalOptions& g) {
  Context c;
  c.cfg = g.config.empty() ? RunConfig{} : at_path(g.config, [&] { return RunConfig::load(g.config); });
  c.cfg.validate();
  c.table = c.cfg.load_class_table();
  c.seed = g.seed.value_or(c.cfg.seed);
  return c;
}

inline Model load_model(const Context& c, const std::string& path) {
  return at_path(path, [&] { return Model::load(c.cfg, c.table, read_file(path)); });
}

}  // namespace detail

/// Runs one command line (args excludes the program name). Returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Scene-graph guided point cloud codec"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed (overrides the config)");
  app.add_option("--threads", g.threads, "worker threads for per-patch work")->check(CLI::PositiveNumber);
  app.add_flag("--json", g.json, "structured output");

  std::string in, out_path, model_path, log_path, original, reconstructed, stream;
  std::vector<std::string> scenes;
  std::optional<std::size_t> points, epochs;
  std::uint32_t frame = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic street scene (.lpc)");
  synth->add_option("--out,-o", out_path, "output .lpc")->required();
  synth->add_option("--points", points, "point count");

  auto* graph = app.add_subcommand("graph", "build and print the scene graph");
  graph->add_option("--in,-i", in, "input cloud")->required()->check(CLI::ExistingFile);
  graph->add_option("--out,-o", out_path, "write NODE/EDGE lines here");
  graph->add_option("--frame", frame, "frame id");

  auto* train = app.add_subcommand("train", "train the four layer models");
  train->add_option("scenes", scenes, "training clouds")->required()->check(CLI::ExistingFile);
  train->add_option("--out,-o", out_path, "checkpoint (rewritten every epoch)")->required();
  train->add_option("--log", log_path, "per-step loss CSV");
  train->add_option("--epochs", epochs, "epochs (overrides the config)");

  auto* encode = app.add_subcommand("encode", "cloud -> .sgpc");
  encode->add_option("--model,-m", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  encode->add_option("--in,-i", in, "input cloud")->required()->check(CLI::ExistingFile);
  encode->add_option("--out,-o", out_path, "output .sgpc")->required();
  encode->add_option("--frame", frame, "frame id");

  auto* decode = app.add_subcommand("decode", ".sgpc -> cloud");
  decode->add_option("--model,-m", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  decode->add_option("--in,-i", in, "input .sgpc")->required()->check(CLI::ExistingFile);
  decode->add_option("--out,-o", out_path, "output .lpc")->required();

  auto* eval = app.add_subcommand("eval", "compare a reconstruction with its original");
  eval->add_option("--original", original, "original cloud")->required()->check(CLI::ExistingFile);
  eval->add_option("--reconstructed", reconstructed, "decoded cloud")->required()->check(CLI::ExistingFile);
  eval->add_option("--stream", stream, "encoded stream whose size is charged")->required()->check(CLI::ExistingFile);

  auto* bench = app.add_subcommand("bench", "rate-distortion sweep (CSV)");
  bench->add_option("scenes", scenes, "clouds")->required()->check(CLI::ExistingFile);
  bench->add_option("--out,-o", out_path, "CSV path (default stdout)");

  std::vector<std::string> argv_store{"sgpc"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    auto ctx = detail::context(g);
    auto& cfg = ctx.cfg;
    if (synth->parsed()) {
      SynthParams p = cfg.synth;
      if (points) p.points = *points;
      const auto cloud = synthesize_scene(p, ctx.seed);
      save_cloud(out_path, cloud);
      if (g.json) {
        out << nlohmann::ordered_json{{"points", cloud.size()}, {"seed", ctx.seed}, {"out", out_path}}.dump() << '\n';
      } else {
        out << "wrote " << cloud.size() << " points to " << out_path << '\n';
      }
    } else if (graph->parsed()) {
      const auto cloud = detail::read_cloud(in);
      const auto gr = build_scene_graph(cloud, ctx.table, cfg.graph, frame);
      const auto patches = make_patches(cloud, gr, cfg.capacities());
      std::array<std::size_t, 4> nodes{}, cells{};
      for (const auto& n : gr.nodes) ++nodes[static_cast<std::size_t>(n.layer - 1)];
      for (const auto& p : patches) ++cells[static_cast<std::size_t>(p.layer - 1)];
      if (!out_path.empty()) {
        std::ostringstream s;
        dump_graph(s, gr);
        detail::write_text(out_path, s.str());
      }
      if (g.json) {
        out << nlohmann::ordered_json{{"nodes", gr.nodes.size()},
                                      {"edges", gr.edges.size()},
                                      {"nodes_per_layer", nodes},
                                      {"patches_per_layer", cells}}
                   .dump()
            << '\n';
      } else {
        if (out_path.empty()) dump_graph(out, gr);
        for (std::size_t l = 0; l < 4; ++l) {
          out << "layer " << l + 1 << ": " << nodes[l] << " nodes, " << cells[l] << " patches\n";
        }
      }
    } else if (train->parsed()) {
      std::vector<Patch> all;
      for (std::size_t s = 0; s < scenes.size(); ++s) {
        const auto cloud = detail::read_cloud(scenes[s]);
        const auto gr = build_scene_graph(cloud, ctx.table, cfg.graph, static_cast<std::uint32_t>(s));
        auto p = make_patches(cloud, gr, cfg.capacities());
        all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
      }
      TrainConfig tc = cfg.train;
      if (epochs) tc.epochs = *epochs;
      Model model = Model::create(cfg, ctx.table, ctx.seed);
      std::ofstream log;
      if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw InputError("cannot open '" + log_path + "' for writing");
        log << StepLog::csv_header() << '\n';
      }
      StepLog last;
      TrainCallbacks cb;
      cb.on_step = [&](const StepLog& s) {
        last = s;
        if (log) log << s.csv_row() << '\n';
      };
      cb.on_epoch = [&](std::size_t e, const Model& m) {
        write_file(out_path, m.checkpoint());
        if (!g.json) err << "epoch " << e + 1 << "/" << tc.epochs << " total " << last.total << '\n';
      };
      write_file(out_path, model.checkpoint());
      train_model(model, patches_by_layer(all), tc, ctx.seed, cb);
      if (g.json) {
        out << nlohmann::ordered_json{{"patches", all.size()}, {"epochs", tc.epochs}, {"final_total", last.total}}.dump()
            << '\n';
      } else {
        out << "trained on " << all.size() << " patches for " << tc.epochs << " epochs; checkpoint " << out_path << '\n';
      }
    } else if (encode->parsed()) {
      auto model = detail::load_model(ctx, model_path);
      const auto cloud = detail::read_cloud(in);
      const auto r = encode_scene(model, cloud, ctx.table, cfg, frame, g.threads);
      const auto bytes = serialize(r.scene, cfg.precision);
      write_file(out_path, bytes);
      const double bpp = compute_bpp(bytes.size(), cloud.size());
      if (g.json) {
        out << nlohmann::ordered_json{{"nodes", r.scene.nodes.size()},
                                      {"patches", r.patch_count},
                                      {"bytes", bytes.size()},
                                      {"bpp", bpp}}
                   .dump()
            << '\n';
      } else {
        out << r.scene.nodes.size() << " nodes, " << r.patch_count << " latents, " << bytes.size() << " bytes, "
            << bpp << " bpp\n";
      }
    } else if (decode->parsed()) {
      auto model = detail::load_model(ctx, model_path);
      const auto scene = detail::at_path(in, [&] { return deserialize(read_file(in)); });
      const auto cloud = detail::at_path(in, [&] { return decode_scene(model, scene, g.threads); });
      save_cloud(out_path, cloud);
      if (g.json) {
        out << nlohmann::ordered_json{{"points", cloud.size()}}.dump() << '\n';
      } else {
        out << "decoded " << cloud.size() << " points to " << out_path << '\n';
      }
    } else if (eval->parsed()) {
      const auto a = detail::read_cloud(original);
      const auto b = detail::read_cloud(reconstructed);
      const auto size = read_file(stream).size();
      const auto report = evaluate(a, b, size);
      if (g.json) {
        out << report.json().dump() << '\n';
      } else {
        out << report.text() << '\n' << MetricsReport::csv_header() << '\n' << report.csv_row() << '\n';
      }
    } else if (bench->parsed()) {
      std::vector<BenchScene> list;
      for (const auto& s : scenes) list.push_back({s, detail::read_cloud(s)});
      const auto rows = run_bench(cfg, ctx.table, list, g.threads);
      std::ostringstream csv;
      csv << bench_csv_header() << '\n';
      for (const auto& r : rows) csv << bench_csv_row(r) << '\n';
      if (out_path.empty()) {
        out << csv.str();
      } else {
        detail::write_text(out_path, csv.str());
      }
    }
  } catch (const ConfigMismatch& e) {
    err << "config mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  }
  return kOk;
}

}  // namespace sgpc::cli
