#include "grouppref/pipeline.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "grouppref/archive.hpp"

namespace grouppref {

namespace fs = std::filesystem;

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::kGenData,        Stage::kTrainPref, Stage::kCluster,
                                    Stage::kTrainGrm,       Stage::kPretrainPolicy,
                                    Stage::kAlign,          Stage::kEval};
  return s;
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTrainPref: return "train-pref";
    case Stage::kCluster: return "cluster";
    case Stage::kTrainGrm: return "train-grm";
    case Stage::kPretrainPolicy: return "pretrain-policy";
    case Stage::kAlign: return "align";
    case Stage::kEval: return "eval";
  }
  throw std::logic_error("unhandled stage");
}

Stage stage_from_name(const std::string& name) {
  for (Stage s : all_stages())
    if (stage_name(s) == name) return s;
  throw ConfigError("unknown stage '" + name + "'");
}

namespace {

const std::vector<std::string> kWorldFiles{"world.json", "users.jsonl", "products.jsonl",
                                           "creatives.jsonl"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

std::vector<std::string> stage_inputs(Stage stage) {
  switch (stage) {
    case Stage::kGenData: return {};
    case Stage::kTrainPref: return concat(kWorldFiles, {"clicks.jsonl"});
    case Stage::kCluster: return concat(kWorldFiles, {"clicks.jsonl", "prefnet.json"});
    case Stage::kTrainGrm: return concat(kWorldFiles, {"groups.jsonl", "gaip.jsonl"});
    case Stage::kPretrainPolicy: return concat(kWorldFiles, {"groups.jsonl", "grm.json"});
    case Stage::kAlign:
      return concat(kWorldFiles, {"groups.jsonl", "grm.json", "policy_ref.json",
                                  "policy_ref_no_group.json"});
    case Stage::kEval:
      return concat(kWorldFiles,
                    {"groups.jsonl", "gaip.jsonl", "prefnet_eval.json", "pairs.jsonl", "grm.json",
                     "grm_no_group.json", "policy_ref.json", "policy_ref_no_group.json",
                     "policy_group_dpo.json", "policy_group_agnostic_dpo.json"});
  }
  return {};
}

std::vector<std::string> stage_outputs(Stage stage) {
  switch (stage) {
    case Stage::kGenData: return concat(kWorldFiles, {"clicks.jsonl"});
    case Stage::kTrainPref: return {"prefnet.json", "prefnet_eval.json"};
    case Stage::kCluster: return {"groups.jsonl", "gaip.jsonl"};
    case Stage::kTrainGrm: return {"pairs.jsonl", "grm.json", "grm_no_group.json", "grm_eval.json"};
    case Stage::kPretrainPolicy:
      return {"policy_ref.json", "policy_ref_no_group.json", "pretrain_curves.json"};
    case Stage::kAlign:
      return {"tuples.jsonl", "tuples_no_group.jsonl", "policy_group_dpo.json",
              "policy_group_agnostic_dpo.json", "align_curves.json"};
    case Stage::kEval: return {"report.json"};
  }
  return {};
}

namespace {

nlohmann::json curve_json(const std::vector<std::pair<int, double>>& curve) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [step, loss] : curve) j.push_back({step, loss});
  return j;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text_atomic(path, j.dump(1) + "\n");
}

nlohmann::json read_json(const fs::path& path) { return nlohmann::json::parse(read_text(path)); }

std::vector<ClickEvent> load_clicks(const fs::path& dir) {
  return from_jsonl<ClickEvent>(read_text(dir / "clicks.jsonl"));
}

std::vector<GroupRepresentation> load_groups(const fs::path& dir) {
  return from_jsonl<GroupRepresentation>(read_text(dir / "groups.jsonl"));
}

std::vector<const GroupRepresentation*> groups_of(const std::vector<GroupRepresentation>& groups,
                                                  int product_id) {
  std::vector<const GroupRepresentation*> out;
  for (const auto& g : groups)
    if (g.product_id == product_id) out.push_back(&g);
  return out;
}

PromptRenderer make_renderer(const World& world, const PipelineConfig& c) {
  return PromptRenderer(world.style_prototypes, c.policy.length, c.policy.vocab,
                        derive_seed(c.seed, "renderer"), c.render_noise);
}

// Users held out from preference-model training.
std::vector<bool> holdout_users(const World& world, const PipelineConfig& c) {
  std::vector<int> ids(world.users.size());
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(c.seed, "holdout-users"));
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n = static_cast<std::size_t>(std::lround(c.pref_holdout_fraction * static_cast<double>(ids.size())));
  std::vector<bool> held(world.users.size(), false);
  for (std::size_t i = 0; i < n; ++i) held[static_cast<std::size_t>(ids[i])] = true;
  return held;
}

void gen_data(const PipelineConfig& c, const fs::path& dir) {
  const World world = build_world(c.world, derive_seed(c.seed, "world"));
  const auto log = sample_click_log(world, c.exposures_per_pair, derive_seed(c.seed, "clicks"));
  save_world(world, dir);
  write_text_atomic(dir / "clicks.jsonl", to_jsonl(log));
  spdlog::info("gen-data: {} users, {} products, {} creatives, {} click events", world.users.size(),
               world.products.size(), world.creatives.size(), log.size());
}

void train_pref(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto log = load_clicks(dir);
  const auto held = holdout_users(world, c);
  std::vector<PrefSample> train_set, test_set;
  for (const auto& ev : log) {
    PrefSample s{&world.user(ev.user_id), &world.product(ev.product_id),
                 &world.creative(ev.creative_id), ev.clicked};
    (held[static_cast<std::size_t>(ev.user_id)] ? test_set : train_set).push_back(s);
  }
  const PrefNetConfig cfg = c.prefnet_config();
  auto result = train(train_set, cfg, init_pref_params(cfg, derive_seed(c.seed, "prefnet-init")));

  std::vector<int> labels;
  for (const auto& s : test_set) labels.push_back(s.label);
  const auto logits = predict_logits(test_set, result.params);
  const double auc = auroc(logits, labels);
  spdlog::info("train-pref: final loss {:.4f}, held-out AUROC {:.4f}", result.curve.back().second, auc);

  save_archive(pref_params_to_archive(result.params, cfg), dir / "prefnet.json");
  write_json(dir / "prefnet_eval.json", {{"curve", curve_json(result.curve)},
                                         {"holdout_auroc", auc},
                                         {"n_train_events", train_set.size()},
                                         {"n_holdout_events", test_set.size()}});
}

void cluster(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto log = load_clicks(dir);
  const auto params = pref_params_from_archive(load_archive(dir / "prefnet.json"));
  std::vector<GroupRepresentation> groups;
  for (const auto& p : world.products) {
    auto g = group_product_users(world, p, params, c.grouping,
                                 derive_seed(c.seed, "cluster", static_cast<std::uint64_t>(p.product_id)));
    groups.insert(groups.end(), g.begin(), g.end());
  }
  const auto gaip = export_gaip(world, log, groups, c.min_exposure);
  write_text_atomic(dir / "groups.jsonl", to_jsonl(groups));
  write_text_atomic(dir / "gaip.jsonl", to_jsonl(gaip));
  spdlog::info("cluster: {} groups over {} products, {} GAIP records", groups.size(),
               world.products.size(), gaip.size());
}

void train_grm_stage(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto groups = load_groups(dir);
  const auto gaip = from_jsonl<GaipRecord>(read_text(dir / "gaip.jsonl"));
  auto pairs = build_pairs(gaip, world);
  if (c.grm.labels == "oracle") pairs = relabel_with_oracle(pairs, world, groups);
  if (pairs.empty()) throw PreconditionError("train-grm: no creative pairs with distinct CTR");
  auto [train_set, test_set] = split_pairs(pairs, c.grm_holdout_fraction, derive_seed(c.seed, "grm-split"));
  if (test_set.empty()) throw PreconditionError("train-grm: held-out pair split is empty");

  const int group_dim = static_cast<int>(train_set.front().group.size());
  nlohmann::json eval = nlohmann::json::object();
  for (const bool use_group : {true, false}) {
    GrmConfig cfg = c.grm;
    cfg.use_group = use_group;
    cfg.seed = derive_seed(c.seed, "grm-train");
    auto res = grm_train(train_set, world, cfg,
                         init_grm_params(group_dim, c.world.d_raw, cfg, derive_seed(c.seed, "grm-init")));
    const double acc = pair_accuracy(res.params, test_set, world);
    const std::string tag = use_group ? "group" : "no_group";
    eval[tag] = {{"holdout_pair_accuracy", acc},
                 {"final_loss", res.curve.empty() ? 0.0 : res.curve.back().second},
                 {"curve", curve_json(res.curve)}};
    save_archive(grm_to_archive(res.params, cfg), dir / (use_group ? "grm.json" : "grm_no_group.json"));
    spdlog::info("train-grm ({}): held-out pair accuracy {:.4f}", tag, acc);
  }
  eval["n_train"] = train_set.size();
  eval["n_holdout"] = test_set.size();
  write_json(dir / "grm_eval.json", eval);

  std::string lines;
  for (const auto& [set, name] : {std::pair{&train_set, "train"}, std::pair{&test_set, "holdout"}}) {
    for (const auto& p : *set) {
      nlohmann::json j = p;
      j["split"] = name;
      lines += j.dump() + "\n";
    }
  }
  write_text_atomic(dir / "pairs.jsonl", lines);
}

std::vector<Vec> group_tokens(const std::vector<const GroupRepresentation*>& groups,
                              const GrmParams& grm) {
  std::vector<Vec> out;
  for (const auto* g : groups) out.push_back(grm_group_token(g->flattened(), grm));
  return out;
}

void pretrain_stage(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto groups = load_groups(dir);
  const auto grm = grm_from_archive(load_archive(dir / "grm.json"));
  const auto renderer = make_renderer(world, c);

  std::vector<PolicyExample> with_group, without_group;
  for (const auto& p : world.products) {
    const auto gs = groups_of(groups, p.product_id);
    const auto tokens = group_tokens(gs, grm);
    for (std::size_t g = 0; g < gs.size(); ++g) {
      for (const Creative* cr : world.creatives_of(p.product_id)) {
        const PromptSeq y = renderer.template_prompt(nearest_style(world, cr->style_tokens));
        with_group.push_back({policy_context(tokens[g], p), y});
        without_group.push_back({policy_context(Vec::Zero(tokens[g].size()), p), y});
      }
    }
  }
  const auto shape = c.policy_shape();
  const auto cfg = c.pretrain_config();
  auto ref = pretrain_policy(with_group, cfg, init_policy_params(shape, derive_seed(c.seed, "policy-init")));
  auto ref_ng = pretrain_policy(without_group, cfg,
                                init_policy_params(shape, derive_seed(c.seed, "policy-init-no-group")));
  const nlohmann::json meta = {{"lr", cfg.lr}, {"epochs", cfg.epochs}};
  save_archive(policy_to_archive(ref.params, "pretrain-policy", meta), dir / "policy_ref.json");
  save_archive(policy_to_archive(ref_ng.params, "pretrain-policy", meta), dir / "policy_ref_no_group.json");
  write_json(dir / "pretrain_curves.json",
             {{"group", curve_json(ref.curve)}, {"no_group", curve_json(ref_ng.curve)}});
  spdlog::info("pretrain-policy: NLL {:.4f} (group), {:.4f} (no group)", ref.curve.back().second,
               ref_ng.curve.back().second);
}

void align_stage(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto groups = load_groups(dir);
  const auto grm = grm_from_archive(load_archive(dir / "grm.json"));
  const auto ref = policy_from_archive(load_archive(dir / "policy_ref.json"));
  const auto ref_ng = policy_from_archive(load_archive(dir / "policy_ref_no_group.json"));
  const auto renderer = make_renderer(world, c);
  const GrmJudge grm_judge(grm, renderer);
  const OracleJudge oracle_judge(world, renderer);
  const PromptJudge& judge = c.judge == "oracle" ? static_cast<const PromptJudge&>(oracle_judge)
                                                 : static_cast<const PromptJudge&>(grm_judge);

  // Each round samples fresh candidates from the current policies, so pairs
  // that only a partly aligned policy would produce get judged too. Tuples
  // accumulate and every round resumes from the previous round's parameters.
  const auto dpo = c.dpo_config();
  struct Run {
    const PolicyParams& ref;
    bool use_group;
    PolicyParams params;
    std::vector<PreferenceTuple> tuples;
    std::vector<std::pair<int, double>> curve;
  };
  Run runs[2] = {{ref, true, ref, {}, {}}, {ref_ng, false, ref_ng, {}, {}}};
  for (int round = 0; round < c.align_rounds; ++round) {
    for (auto& run : runs) {
      for (const auto& p : world.products) {
        const auto gs = groups_of(groups, p.product_id);
        std::vector<GroupRepresentation> owned;
        for (const auto* g : gs) owned.push_back(*g);
        auto tokens = group_tokens(gs, grm);
        if (!run.use_group)
          for (auto& e : tokens) e.setZero();
        auto t = build_tuples(p, owned, tokens, run.params, judge, c.n_candidates,
                              derive_seed(c.seed, run.use_group ? "tuples" : "tuples-no-group",
                                          static_cast<std::uint64_t>(round * 1000003 + p.product_id)));
        for (auto& x : t) x.round = round;
        run.tuples.insert(run.tuples.end(), t.begin(), t.end());
      }
      if (run.tuples.empty()) throw PreconditionError("align: no preference tuples could be built");
      auto res = align(dpo_examples(run.tuples, world, run.use_group), dpo, run.ref, &run.params);
      const int offset = run.curve.empty() ? 0 : run.curve.back().first;
      for (std::size_t i = run.curve.empty() ? 0 : 1; i < res.curve.size(); ++i)
        run.curve.emplace_back(offset + res.curve[i].first, res.curve[i].second);
      run.params = std::move(res.params);
    }
    spdlog::info("align round {}: {} / {} tuples, DPO loss {:.4f} (group), {:.4f} (agnostic)", round,
                 runs[0].tuples.size(), runs[1].tuples.size(), runs[0].curve.back().second,
                 runs[1].curve.back().second);
  }
  write_text_atomic(dir / "tuples.jsonl", to_jsonl(runs[0].tuples));
  write_text_atomic(dir / "tuples_no_group.jsonl", to_jsonl(runs[1].tuples));
  const nlohmann::json meta = {{"beta", dpo.beta},   {"lr", dpo.lr},
                               {"steps", dpo.steps}, {"optimizer", dpo.optimizer},
                               {"rounds", c.align_rounds}};
  save_archive(policy_to_archive(runs[0].params, "align", meta), dir / "policy_group_dpo.json");
  save_archive(policy_to_archive(runs[1].params, "align", meta),
               dir / "policy_group_agnostic_dpo.json");
  write_json(dir / "align_curves.json", {{"group_dpo", curve_json(runs[0].curve)},
                                         {"group_agnostic_dpo", curve_json(runs[1].curve)}});
}

EvalReport eval_stage(const PipelineConfig& c, const fs::path& dir) {
  const World world = load_world(dir);
  const auto groups = load_groups(dir);
  const auto gaip = from_jsonl<GaipRecord>(read_text(dir / "gaip.jsonl"));
  const auto grm = grm_from_archive(load_archive(dir / "grm.json"));
  const auto grm_ng = grm_from_archive(load_archive(dir / "grm_no_group.json"));
  const auto renderer = make_renderer(world, c);

  EvalReport r;
  r.seed = c.seed;
  r.config = config_to_json(c);

  const auto table = ctr_table_from_gaip(gaip);
  r.ndcg_at_5_mean = cross_group_ndcg(table, c.ndcg_k);
  std::set<int> ndcg_products;
  {
    std::map<int, int> n_groups;
    for (const auto& [key, ctrs] : table) ++n_groups[key.first];
    for (const auto& [pid, n] : n_groups)
      if (n >= 2) ndcg_products.insert(pid);
  }
  r.n_products = static_cast<int>(ndcg_products.size());

  r.auroc = read_json(dir / "prefnet_eval.json").at("holdout_auroc").get<double>();

  std::vector<PrefPairSample> holdout;
  std::size_t n_pairs = 0;
  {
    const std::string text = read_text(dir / "pairs.jsonl");
    std::size_t pos = 0;
    while (pos < text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string::npos) nl = text.size();
      if (nl > pos) {
        const auto j = nlohmann::json::parse(text.substr(pos, nl - pos));
        ++n_pairs;
        if (j.at("split") == "holdout") holdout.push_back(j.get<PrefPairSample>());
      }
      pos = nl + 1;
    }
  }
  r.n_pairs = static_cast<int>(n_pairs);
  r.pair_accuracy = pair_accuracy(grm, holdout, world);

  struct PolicyEntry {
    std::string name;
    std::string file;
    bool use_group;
  };
  const std::vector<PolicyEntry> policies{
      {"pretrained", "policy_ref.json", true},
      {"group_agnostic_dpo", "policy_group_agnostic_dpo.json", false},
      {"group_dpo", "policy_group_dpo.json", true},
      {"pretrained_no_group", "policy_ref_no_group.json", false}};
  std::map<std::string, double> ctrs;
  for (const auto& pe : policies) {
    const auto params = policy_from_archive(load_archive(dir / pe.file));
    std::map<std::pair<int, int>, PromptSeq> prompts;
    for (const auto& g : groups) {
      Vec e_g = grm_group_token(g.flattened(), grm);
      if (!pe.use_group) e_g.setZero();
      prompts[{g.product_id, g.group_index}] =
          generate(world.product(g.product_id), e_g, params, DecodeMode::kArgmax);
    }
    ctrs[pe.name] = simulated_ctr(world, groups, prompts, renderer);
  }
  for (const char* name : {"pretrained", "group_agnostic_dpo", "group_dpo"}) r.ctr_by_policy[name] = ctrs[name];

  // Best achievable: each group shown its own oracle-best style.
  double best = 0.0, total = 0.0;
  for (const auto& g : groups) {
    const int cat = world.product(g.product_id).category;
    double b = 0.0;
    for (int s = 0; s < world.config.n_styles; ++s) b = std::max(b, group_oracle_ctr(world, g, cat, s));
    best += b * static_cast<double>(g.member_ids.size());
    total += static_cast<double>(g.member_ids.size());
  }
  r.ablations = {{"grm_no_group_pair_accuracy", pair_accuracy(grm_ng, holdout, world)},
                 {"ctr_pretrained_no_group", ctrs["pretrained_no_group"]},
                 {"ctr_oracle_best_style", best / total},
                 {"n_groups", groups.size()}};

  write_json(dir / "report.json", r);
  spdlog::info("eval: ndcg@5 {:.4f}, auroc {:.4f}, pair acc {:.4f}, ctr pretrained {:.4f} / agnostic {:.4f} / group {:.4f}",
               r.ndcg_at_5_mean, r.auroc, r.pair_accuracy, r.ctr_by_policy["pretrained"],
               r.ctr_by_policy["group_agnostic_dpo"], r.ctr_by_policy["group_dpo"]);
  return r;
}

}  // namespace

void run_stage(Stage stage, const PipelineConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  for (const auto& f : stage_inputs(stage))
    if (!fs::exists(out_dir / f))
      throw MissingArtifactError(f);
  write_text_atomic(out_dir / "config.ini", to_ini(config));
  switch (stage) {
    case Stage::kGenData: gen_data(config, out_dir); break;
    case Stage::kTrainPref: train_pref(config, out_dir); break;
    case Stage::kCluster: cluster(config, out_dir); break;
    case Stage::kTrainGrm: train_grm_stage(config, out_dir); break;
    case Stage::kPretrainPolicy: pretrain_stage(config, out_dir); break;
    case Stage::kAlign: align_stage(config, out_dir); break;
    case Stage::kEval: eval_stage(config, out_dir); break;
  }
}

EvalReport run_pipeline(const PipelineConfig& config, const fs::path& out_dir) {
  for (Stage s : all_stages()) run_stage(s, config, out_dir);
  return read_json(out_dir / "report.json").get<EvalReport>();
}

}  // namespace grouppref
