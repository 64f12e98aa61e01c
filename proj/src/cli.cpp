#include "coseg/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "coseg/audit.hpp"
#include "coseg/io.hpp"

#ifndef COSEG_VERSION
#define COSEG_VERSION "0"
#endif

namespace coseg::cli {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kCommands{"gen-data", "train", "eval", "gradcheck", "profile", "export-masks"};

struct Proxies {
  std::string protocol, frame_select, temporal;
  std::vector<std::size_t> cosam_after, srim_after;
};

void bind(CLI::App& app, RunConfig& c, Proxies& p) {
  auto* g = "Data";
  app.add_option("--num_ids", c.data.num_ids, "identities")->group(g)->capture_default_str();
  app.add_option("--snippets_per_id", c.data.snippets_per_id)->group(g)->capture_default_str();
  app.add_option("--track_len", c.data.track_len, "frames rendered per snippet")->group(g)->capture_default_str();
  app.add_option("--height", c.data.height)->group(g)->capture_default_str();
  app.add_option("--width", c.data.width)->group(g)->capture_default_str();
  app.add_option("--data_seed", c.data.seed)->group(g)->capture_default_str();
  app.add_option("--occluder_prob", c.data.occluder_prob)->group(g)->capture_default_str();
  app.add_option("--clutter_items", c.data.clutter_items)->group(g)->capture_default_str();
  app.add_option("--distractors", c.data.distractors, "other identities pasted per frame")->group(g)->capture_default_str();
  app.add_option("--center_jitter", c.data.center_jitter)->group(g)->capture_default_str();
  app.add_option("--protocol", p.protocol, "shared | disjoint")
      ->check(CLI::IsMember({"shared", "disjoint"}))
      ->group(g)
      ->capture_default_str();
  app.add_option("--data_dir", c.data_dir, "load a generated dataset instead of rendering one")->group(g);

  g = "Model";
  app.add_option("--frames", c.frames, "N frames per snippet")->group(g)->capture_default_str();
  app.add_option("--frame_select", p.frame_select, "sequential | random")
      ->check(CLI::IsMember({"sequential", "random"}))
      ->group(g)
      ->capture_default_str();
  app.add_option("--cosam", c.cosam)->group(g)->capture_default_str();
  app.add_option("--cosam_after", p.cosam_after, "backbone blocks followed by COSAM")->delimiter(',')->group(g)->capture_default_str();
  app.add_option("--refs", c.refs, "K reference frames")->group(g)->capture_default_str();
  app.add_option("--reduced", c.reduced, "D_R (capped at half the block width)")->group(g)->capture_default_str();
  app.add_option("--spatial", c.spatial)->group(g)->capture_default_str();
  app.add_option("--channel", c.channel)->group(g)->capture_default_str();
  app.add_option("--srim", c.srim)->group(g)->capture_default_str();
  app.add_option("--srim_after", p.srim_after)->delimiter(',')->group(g)->capture_default_str();
  app.add_option("--srim_reduced", c.srim_reduced)->group(g)->capture_default_str();
  app.add_option("--srim_objects", c.srim_objects)->group(g)->capture_default_str();
  app.add_option("--srim_heads", c.srim_heads)->group(g)->capture_default_str();
  app.add_option("--srim_window", c.srim_window)->group(g)->capture_default_str();
  app.add_option("--temporal", p.temporal, "avg (alias tp_avg) | attention (alias ta)")
      ->check(CLI::IsMember({"avg", "tp_avg", "attention", "ta"}))
      ->group(g)
      ->capture_default_str();
  app.add_option("--normalize", c.normalize, "L2-normalize embeddings")->group(g)->capture_default_str();

  g = "Training";
  app.add_option("--objective", c.objective, "reid | distill")
      ->check(CLI::IsMember({"reid", "distill"}))
      ->group(g)
      ->capture_default_str();
  app.add_option("--margin", c.margin)->group(g)->capture_default_str();
  app.add_option("--lambda", c.lambda)->group(g)->capture_default_str();
  app.add_option("--lambda_kl", c.lambda_kl)->group(g)->capture_default_str();
  app.add_option("--lr", c.adam.lr)->group(g)->capture_default_str();
  app.add_option("--beta1", c.adam.beta1)->group(g)->capture_default_str();
  app.add_option("--beta2", c.adam.beta2)->group(g)->capture_default_str();
  app.add_option("--adam_eps", c.adam.eps)->group(g)->capture_default_str();
  app.add_option("--steps", c.steps)->group(g)->capture_default_str();
  app.add_option("--decay_every", c.decay_every, "0: a quarter of the steps")->group(g)->capture_default_str();
  app.add_option("--decay_factor", c.decay_factor)->group(g)->capture_default_str();
  app.add_option("--batch_ids", c.batch_ids, "P identities per batch")->group(g)->capture_default_str();
  app.add_option("--batch_snippets", c.batch_snippets, "K snippets per identity")->group(g)->capture_default_str();
  app.add_option("--log_every", c.log_every)->group(g)->capture_default_str();
  app.add_option("--eval_chunk", c.eval_chunk)->group(g)->capture_default_str();
  app.add_option("--seed", c.seed)->group(g)->capture_default_str();
  app.add_option("--output_dir", c.output_dir)->group(g);
}

void resolve(RunConfig& c, const Proxies& p) {
  c.data.protocol = parse_protocol(p.protocol);
  c.frame_select = parse_frame_select(p.frame_select);
  c.temporal = parse_temporal_mode(p.temporal);
  c.cosam_after = {p.cosam_after.begin(), p.cosam_after.end()};
  c.srim_after = {p.srim_after.begin(), p.srim_after.end()};
}

std::string frame_select_name(FrameSelect f) { return f == FrameSelect::sequential ? "sequential" : "random"; }

nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j;
  std::istringstream is(c.canonical());
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_run_record(const Invocation& inv, const fs::path& dir, const nlohmann::json& extra) {
  nlohmann::json j;
  j["command"] = inv.command;
  j["config_hash"] = inv.cfg.hash();
  j["seed"] = inv.cfg.seed;
  j["data_seed"] = inv.cfg.data.seed;
  j["config"] = config_json(inv.cfg);
  j["argv"] = inv.argv;
  j["versions"] = {{"coseg", COSEG_VERSION}, {"compiler", __VERSION__}, {"cplusplus", __cplusplus}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_text(dir / "run.json", j.dump(2) + "\n");
  write_text(dir / "config.ini", inv.config_text);
}

nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  for (std::size_t i = 0; i < r.ranks.size(); ++i) j["cmc@" + std::to_string(r.ranks[i])] = r.cmc[i];
  j["map"] = r.map;
  j["chance_map"] = r.chance_map;
  j["queries"] = r.queries;
  j["gallery"] = r.gallery;
  if (r.has_mask) {
    for (const auto& m : r.masks)
      j["masks"].push_back({{"block", m.block}, {"coverage", m.coverage}, {"gt_area", m.gt_area}, {"frames", m.frames}});
    j["coverage"] = r.coverage;
    j["gt_area"] = r.gt_area;
    j["coverage_frames"] = r.coverage_frames;
  }
  return j;
}

std::unique_ptr<Network> restore(const Invocation& inv, const Dataset& ds) {
  auto net = build_network(inv.cfg, ds.train_identities().size());
  if (!inv.checkpoint.empty()) load_checkpoint(inv.checkpoint, net->params);
  return net;
}

int cmd_gen_data(const Invocation& inv, std::ostream& out) {
  const fs::path dir = output_dir(inv);
  Dataset ds = make_dataset(inv.cfg.data);
  save_dataset(ds, dir);
  write_run_record(inv, dir, {{"snippets", ds.snippets.size()}});
  out << "dataset=" << dir.string() << "\nsnippets=" << ds.snippets.size() << "\n";
  return kOk;
}

int cmd_train(const Invocation& inv, std::ostream& out) {
  const fs::path dir = output_dir(inv);
  fs::create_directories(dir);
  const Dataset ds = obtain_dataset(inv.cfg);
  auto net = build_network(inv.cfg, ds.train_identities().size());
  std::ofstream log(dir / "train.log", std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + (dir / "train.log").string());
  log << "# run " << inv.cfg.hash() << "\n";
  std::ostringstream tee;
  const auto steps = train(inv.cfg, ds, *net, &tee);
  log << tee.str();
  out << tee.str();
  save_checkpoint(dir / "model.ckpt", net->params);
  const EvalReport r = evaluate(inv.cfg, ds, *net);
  write_text(dir / "report.txt", format_report(r));
  write_text(dir / "report.json", report_json(r).dump(2) + "\n");
  write_run_record(inv, dir,
                   {{"checkpoint", (dir / "model.ckpt").string()}, {"steps_logged", steps.size()}, {"report", report_json(r)}});
  out << format_report(r) << "run_dir=" << dir.string() << "\n";
  return kOk;
}

int cmd_eval(const Invocation& inv, std::ostream& out) {
  const Dataset ds = obtain_dataset(inv.cfg);
  auto net = restore(inv, ds);
  const EvalReport r = evaluate(inv.cfg, ds, *net);
  const fs::path dir = output_dir(inv);
  fs::create_directories(dir);
  write_text(dir / "eval.txt", format_report(r));
  write_text(dir / "eval.json", report_json(r).dump(2) + "\n");
  write_run_record(inv, dir, {{"checkpoint", inv.checkpoint}, {"report", report_json(r)}});
  out << format_report(r);
  return kOk;
}

int cmd_gradcheck(std::ostream& out) {
  std::size_t failed = 0;
  const auto checks = gradient_audit();
  char buf[160];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof buf, "%-22s seed=%llu max_rel_error=%.3e %s\n", c.name.c_str(),
                  static_cast<unsigned long long>(c.seed), c.max_rel_error, c.passed ? "ok" : "FAIL");
    out << buf;
    failed += !c.passed;
  }
  out << "checks=" << checks.size() << " failed=" << failed << "\n";
  return failed ? kFailure : kOk;
}

int cmd_profile(const Invocation& inv, std::ostream& out) {
  CosamConfig c;
  c.reduced = inv.cfg.reduced;
  c.refs = inv.cfg.refs;
  c.mlp_hidden = inv.cfg.reduced;
  const auto geoms = inv.geometries.empty() ? std::vector<Geometry>{Geometry{}} : inv.geometries;
  const auto rows = compare(geoms, c);
  out << (inv.key_values ? format_cost_keyvalues(rows) : format_cost_table(rows));
  return kOk;
}

int cmd_export_masks(const Invocation& inv, std::ostream& out) {
  const Dataset ds = obtain_dataset(inv.cfg);
  auto net = restore(inv, ds);
  const fs::path dir = output_dir(inv) / "masks";
  std::vector<std::size_t> ids = inv.snippets;
  if (ids.empty()) ids = ds.indices(Split::query);
  for (auto id : ids)
    if (id >= ds.snippets.size()) throw std::invalid_argument("snippet " + std::to_string(id) + " out of range");
  const SnippetOutputs o = run_snippets(inv.cfg, ds, *net, ids);
  const std::size_t n = inv.cfg.frames;
  std::size_t written = 0;
  for (std::size_t s = 0; s < ids.size(); ++s) {
    SnippetSample cut = ds.snippets[ids[s]];
    const std::size_t h = cut.frames.dim(2), w = cut.frames.dim(3);
    Tensor frames({n, 3, h, w}), gt({n, 1, h, w});
    std::copy_n(cut.frames.data().begin(), frames.numel(), frames.data().begin());
    std::copy_n(cut.gt_masks.data().begin(), gt.numel(), gt.data().begin());
    cut.frames = std::move(frames);
    cut.gt_masks = std::move(gt);
    export_snippet_pgm(cut, dir);
    written += 2 * n;
    for (std::size_t b = 0; b < o.masks.size(); ++b) {
      const Tensor& m = o.masks[b];
      const std::size_t mh = m.dim(2), mw = m.dim(3), mhw = mh * mw;
      for (std::size_t t = 0; t < n; ++t) {
        char name[64];
        std::snprintf(name, sizeof name, "snippet%04d_cosam%zu_%02zu.pgm", cut.snippet, o.mask_blocks[b], t);
        save_pgm(dir / name, mh, mw, std::span<const double>(m.data().data() + (s * n + t) * mhw, mhw));
        ++written;
      }
    }
  }
  out << "masks_dir=" << dir.string() << "\nimages=" << written << "\n";
  return kOk;
}

}  // namespace

Geometry parse_geometry(const std::string& s) {
  Geometry g;
  std::size_t* dims[4] = {&g.n, &g.d, &g.h, &g.w};
  std::istringstream is(s);
  std::string part;
  int i = 0;
  while (std::getline(is, part, 'x')) {
    if (i == 4 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("geometry must look like NxDxHxW, got '" + s + "'");
    *dims[i++] = std::stoull(part);
  }
  if (i != 4) throw std::invalid_argument("geometry must look like NxDxHxW, got '" + s + "'");
  return g;
}

Invocation parse(const std::vector<std::string>& args) {
  Invocation inv;
  inv.argv = args;
  CLI::App app{"Co-segmentation attention toolkit"};
  app.name(args.empty() ? "coseg" : args[0]);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "config file of option = value lines");
  Proxies p{protocol_name(inv.cfg.data.protocol), frame_select_name(inv.cfg.frame_select),
            temporal_mode_name(inv.cfg.temporal),
            {inv.cfg.cosam_after.begin(), inv.cfg.cosam_after.end()},
            {inv.cfg.srim_after.begin(), inv.cfg.srim_after.end()}};
  bind(app, inv.cfg, p);
  app.require_subcommand(1, 1);

  std::vector<std::string> geoms;
  CLI::App* sub[6];
  const char* help[6] = {"render a synthetic dataset", "train and write a checkpoint", "evaluate retrieval and attention",
                         "run the gradient audit", "print the cost comparison", "write attention masks as PGM"};
  for (int i = 0; i < 6; ++i) {
    sub[i] = app.add_subcommand(kCommands[i], help[i]);
    sub[i]->fallthrough();
  }
  for (CLI::App* s : {sub[2], sub[5]}) s->add_option("--checkpoint", inv.checkpoint, "checkpoint to load");
  sub[5]->add_option("--snippets", inv.snippets, "snippet ids (default: queries)")->delimiter(',');
  sub[4]->add_option("--geometry", geoms, "NxDxHxW (repeatable)");
  sub[4]->add_flag("--kv", inv.key_values, "key=value output");

  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp&) {
    throw UsageError(app.help());
  } catch (const CLI::CallForAllHelp&) {
    throw UsageError(app.help());
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  for (int i = 0; i < 6; ++i)
    if (sub[i]->parsed()) inv.command = kCommands[i];
  try {
    resolve(inv.cfg, p);
    for (const auto& g : geoms) inv.geometries.push_back(parse_geometry(g));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::ostringstream cfg;
  for (const CLI::Option* o : app.get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name == "config") continue;
    std::string v = o->as<std::string>();
    if (v.empty()) v = o->get_default_str();
    if (o->get_type_size_max() > 1 || o->get_expected_max() > 1) {
      std::vector<std::string> items = o->results().empty() ? std::vector<std::string>{} : o->results();
      if (items.empty()) {
        std::string d = o->get_default_str();
        if (d.size() >= 2 && d.front() == '[') d = d.substr(1, d.size() - 2);
        v = d;
      } else {
        v.clear();
        for (const auto& it : items) v += (v.empty() ? "" : ",") + it;
      }
      cfg << name << " = \"" << v << "\"\n";
    } else if (!v.empty()) {
      const bool text = o->get_type_name() == "TEXT";
      cfg << name << " = " << (text ? "\"" + v + "\"" : v) << "\n";
    }
  }
  inv.config_text = cfg.str();
  return inv;
}

fs::path output_dir(const Invocation& inv) {
  if (!inv.cfg.output_dir.empty()) return inv.cfg.output_dir;
  const char* root = std::getenv("COSEG_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / (inv.command + "-" + inv.cfg.hash());
}

int run(const Invocation& given, std::ostream& out, std::ostream& err) {
  Invocation inv = given;
  try {
    // a stored dataset carries its own generation settings
    if (!inv.cfg.data_dir.empty() && inv.command != "gen-data") {
      if (!fs::is_directory(inv.cfg.data_dir)) throw std::invalid_argument("data_dir " + inv.cfg.data_dir + " does not exist");
      inv.cfg.data = load_dataset(inv.cfg.data_dir).config;
    }
    if (inv.command == "gen-data") {
      inv.cfg.data.validate();
    } else if (inv.command != "gradcheck" && inv.command != "profile") {
      inv.cfg.validate();
      if (!inv.checkpoint.empty() && !fs::is_regular_file(inv.checkpoint))
        throw std::invalid_argument("checkpoint " + inv.checkpoint + " does not exist");
    } else if (inv.command == "profile") {
      if (inv.cfg.refs == 0 || inv.cfg.reduced == 0) throw std::invalid_argument("refs and reduced must be positive");
    }
  } catch (const std::exception& e) {
    err << "invalid configuration: " << e.what() << "\n";
    return kInvalid;
  }
  try {
    if (inv.command == "gen-data") return cmd_gen_data(inv, out);
    if (inv.command == "train") return cmd_train(inv, out);
    if (inv.command == "eval") return cmd_eval(inv, out);
    if (inv.command == "gradcheck") return cmd_gradcheck(out);
    if (inv.command == "profile") return cmd_profile(inv, out);
    if (inv.command == "export-masks") return cmd_export_masks(inv, out);
    err << "unknown command " << inv.command << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << inv.command << " failed: " << e.what() << "\n";
    return kFailure;
  }
}

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Invocation inv;
  try {
    inv = parse(args);
  } catch (const UsageError& e) {
    err << e.what() << "\n";
    return kUsage;
  }
  return run(inv, out, err);
}

}  // namespace coseg::cli
