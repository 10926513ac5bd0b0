#include "grouppref/config.hpp"

#include <algorithm>
#include <charconv>
#include <climits>
#include <functional>
#include <sstream>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "grouppref/archive.hpp"

namespace grouppref {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

struct Field {
  std::string section;  // empty: top level
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;

  std::string path() const { return section.empty() ? key : section + "." + key; }
};

template <class T, class Access>
Field num(std::string section, std::string key, Access access) {
  Field f;
  f.section = std::move(section);
  f.key = std::move(key);
  f.get = [access](const PipelineConfig& c) {
    const T v = access(const_cast<PipelineConfig&>(c));
    if constexpr (std::is_floating_point_v<T>) return fmt_double(v);
    else return std::to_string(v);
  };
  f.set = [access](PipelineConfig& c, const std::string& path, const std::string& text) {
    access(c) = parse_number<T>(path, text);
  };
  return f;
}

template <class Access>
Field str(std::string section, std::string key, Access access) {
  Field f;
  f.section = std::move(section);
  f.key = std::move(key);
  f.get = [access](const PipelineConfig& c) { return std::string(access(const_cast<PipelineConfig&>(c))); };
  f.set = [access](PipelineConfig& c, const std::string&, const std::string& text) { access(c) = text; };
  return f;
}

const std::vector<Field>& fields() {
  using C = PipelineConfig;
  static const std::vector<Field> all = [] {
    std::vector<Field> v;
    v.push_back(num<std::uint64_t>("", "seed", [](C& c) -> std::uint64_t& { return c.seed; }));

    v.push_back(num<int>("world", "n_users", [](C& c) -> int& { return c.world.n_users; }));
    v.push_back(num<int>("world", "n_products", [](C& c) -> int& { return c.world.n_products; }));
    v.push_back(num<int>("world", "n_categories", [](C& c) -> int& { return c.world.n_categories; }));
    v.push_back(num<int>("world", "creatives_per_product", [](C& c) -> int& { return c.world.creatives_per_product; }));
    v.push_back(num<int>("world", "n_styles", [](C& c) -> int& { return c.world.n_styles; }));
    v.push_back(num<int>("world", "n_attr", [](C& c) -> int& { return c.world.n_attr; }));
    {
      Field f;
      f.section = "world";
      f.key = "cardinalities";
      f.get = [](const C& c) {
        std::string s;
        for (std::size_t i = 0; i < c.world.cardinalities.size(); ++i)
          s += (i ? "," : "") + std::to_string(c.world.cardinalities[i]);
        return s.empty() ? std::string("auto") : s;
      };
      f.set = [](C& c, const std::string& path, const std::string& text) {
        c.world.cardinalities.clear();
        if (text == "auto" || text.empty()) return;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) c.world.cardinalities.push_back(parse_number<int>(path, item));
      };
      v.push_back(f);
    }
    v.push_back(num<int>("world", "d_raw", [](C& c) -> int& { return c.world.d_raw; }));
    v.push_back(num<int>("world", "m_t", [](C& c) -> int& { return c.world.m_t; }));
    v.push_back(num<int>("world", "m_v", [](C& c) -> int& { return c.world.m_v; }));
    v.push_back(num<int>("world", "n_segments", [](C& c) -> int& { return c.world.n_segments; }));
    v.push_back(num<double>("world", "token_noise", [](C& c) -> double& { return c.world.token_noise; }));
    v.push_back(num<double>("world", "title_noise", [](C& c) -> double& { return c.world.title_noise; }));
    v.push_back(num<double>("world", "base_logit", [](C& c) -> double& { return c.world.base_logit; }));
    v.push_back(num<double>("world", "affinity_scale", [](C& c) -> double& { return c.world.affinity_scale; }));
    {
      Field f;
      f.section = "world";
      f.key = "mode";
      f.get = [](const C& c) { return to_string(c.world.mode); };
      f.set = [](C& c, const std::string&, const std::string& text) {
        c.world.mode = preference_mode_from_string(text);
      };
      v.push_back(f);
    }
    v.push_back(num<int>("world", "exposures_per_pair", [](C& c) -> int& { return c.exposures_per_pair; }));
    v.push_back(num<int>("world", "min_exposure", [](C& c) -> int& { return c.min_exposure; }));

    v.push_back(num<int>("prefnet", "dim_d", [](C& c) -> int& { return c.pref_dim_d; }));
    v.push_back(num<int>("prefnet", "dim_dprime", [](C& c) -> int& { return c.pref_dim_dprime; }));
    v.push_back(num<double>("prefnet", "lr", [](C& c) -> double& { return c.pref_lr; }));
    v.push_back(num<int>("prefnet", "epochs", [](C& c) -> int& { return c.pref_epochs; }));
    v.push_back(num<int>("prefnet", "batch_size", [](C& c) -> int& { return c.pref_batch_size; }));
    v.push_back(num<double>("prefnet", "holdout_fraction", [](C& c) -> double& { return c.pref_holdout_fraction; }));

    v.push_back(num<int>("grouping", "k_min", [](C& c) -> int& { return c.grouping.k_min; }));
    v.push_back(num<int>("grouping", "k_max", [](C& c) -> int& { return c.grouping.k_max; }));
    {
      Field f;
      f.section = "grouping";
      f.key = "percentile_spec";
      f.get = [](const C& c) { return c.grouping.spec.to_string(); };
      f.set = [](C& c, const std::string&, const std::string& text) {
        const int cap = c.grouping.spec.capacity;
        c.grouping.spec = PercentileSpec::parse(text, INT_MAX);
        c.grouping.spec.capacity = cap;
      };
      v.push_back(f);
    }
    v.push_back(num<int>("grouping", "capacity_J", [](C& c) -> int& { return c.grouping.spec.capacity; }));
    v.push_back(num<int>("grouping", "n_init", [](C& c) -> int& { return c.grouping.kmeans.n_init; }));
    v.push_back(num<int>("grouping", "max_iter", [](C& c) -> int& { return c.grouping.kmeans.max_iter; }));
    v.push_back(num<double>("grouping", "tol", [](C& c) -> double& { return c.grouping.kmeans.tol; }));

    v.push_back(num<int>("grm", "hidden", [](C& c) -> int& { return c.grm.hidden; }));
    v.push_back(num<int>("grm", "d_g", [](C& c) -> int& { return c.grm.d_g; }));
    v.push_back(num<int>("grm", "encoder_hidden", [](C& c) -> int& { return c.grm.encoder_hidden; }));
    v.push_back(num<double>("grm", "lr", [](C& c) -> double& { return c.grm.lr; }));
    v.push_back(num<int>("grm", "epochs", [](C& c) -> int& { return c.grm.epochs; }));
    v.push_back(str("grm", "labels", [](C& c) -> std::string& { return c.grm.labels; }));
    v.push_back(num<double>("grm", "holdout_fraction", [](C& c) -> double& { return c.grm_holdout_fraction; }));

    v.push_back(num<int>("aligner", "L", [](C& c) -> int& { return c.policy.length; }));
    v.push_back(num<int>("aligner", "V", [](C& c) -> int& { return c.policy.vocab; }));
    v.push_back(num<int>("aligner", "d_h", [](C& c) -> int& { return c.policy.d_h; }));
    v.push_back(num<int>("aligner", "d_tok", [](C& c) -> int& { return c.policy.d_tok; }));
    v.push_back(num<double>("aligner", "beta", [](C& c) -> double& { return c.beta; }));
    v.push_back(num<double>("aligner", "lr", [](C& c) -> double& { return c.align_lr; }));
    v.push_back(num<int>("aligner", "steps", [](C& c) -> int& { return c.align_steps; }));
    v.push_back(num<int>("aligner", "rounds", [](C& c) -> int& { return c.align_rounds; }));
    v.push_back(str("aligner", "optimizer", [](C& c) -> std::string& { return c.align_optimizer; }));
    v.push_back(num<int>("aligner", "n_candidates", [](C& c) -> int& { return c.n_candidates; }));
    v.push_back(str("aligner", "judge", [](C& c) -> std::string& { return c.judge; }));
    v.push_back(num<double>("aligner", "pretrain_lr", [](C& c) -> double& { return c.pretrain_lr; }));
    v.push_back(num<int>("aligner", "pretrain_epochs", [](C& c) -> int& { return c.pretrain_epochs; }));
    v.push_back(num<double>("aligner", "render_noise", [](C& c) -> double& { return c.render_noise; }));

    v.push_back(num<int>("eval", "ndcg_k", [](C& c) -> int& { return c.ndcg_k; }));
    return v;
  }();
  return all;
}

const std::vector<std::string> kSections{"world", "prefnet", "grouping", "grm", "aligner", "eval"};

}  // namespace

void PipelineConfig::validate() const {
  world.validate();
  if (exposures_per_pair < 1) throw ConfigError("world.exposures_per_pair must be >= 1");
  if (min_exposure < 0) throw ConfigError("world.min_exposure must be >= 0");
  prefnet_config().validate();
  if (!(pref_holdout_fraction > 0.0 && pref_holdout_fraction < 1.0))
    throw ConfigError("prefnet.holdout_fraction must be in (0, 1)");
  if (grouping.k_min < 2 || grouping.k_max < grouping.k_min)
    throw ConfigError("grouping requires 2 <= k_min <= k_max");
  grouping.spec.validate();
  if (grouping.kmeans.n_init < 1 || grouping.kmeans.max_iter < 1 || !(grouping.kmeans.tol >= 0.0))
    throw ConfigError("grouping n_init/max_iter/tol out of range");
  grm.validate();
  if (!(grm_holdout_fraction > 0.0 && grm_holdout_fraction < 1.0))
    throw ConfigError("grm.holdout_fraction must be in (0, 1)");
  policy_shape().validate();
  if (policy.vocab < world.n_styles)
    throw ConfigError("aligner.V must be at least world.n_styles");
  dpo_config().validate();
  if (align_rounds < 1) throw ConfigError("aligner.rounds must be >= 1");
  if (n_candidates < 2) throw ConfigError("aligner.n_candidates must be >= 2");
  if (judge != "grm" && judge != "oracle") throw ConfigError("aligner.judge must be 'grm' or 'oracle'");
  if (!(pretrain_lr >= 0.0) || pretrain_epochs < 0) throw ConfigError("aligner pretrain lr/epochs out of range");
  if (!(render_noise >= 0.0)) throw ConfigError("aligner.render_noise must be >= 0");
  if (ndcg_k < 1) throw ConfigError("eval.ndcg_k must be >= 1");
}

PrefNetConfig PipelineConfig::prefnet_config() const {
  PrefNetConfig c = PrefNetConfig::for_world(world);
  c.dim_d = pref_dim_d;
  c.dim_dprime = pref_dim_dprime;
  c.lr = pref_lr;
  c.epochs = pref_epochs;
  c.batch_size = pref_batch_size;
  c.seed = derive_seed(seed, "prefnet-train");
  return c;
}

PolicyShape PipelineConfig::policy_shape() const {
  PolicyShape s = policy;
  s.context_dim = grm.d_g + world.d_raw;
  return s;
}

DpoConfig PipelineConfig::dpo_config() const {
  DpoConfig c;
  c.beta = beta;
  c.lr = align_lr;
  c.steps = align_steps;
  c.optimizer = align_optimizer;
  c.seed = derive_seed(seed, "align");
  return c;
}

PretrainConfig PipelineConfig::pretrain_config() const {
  PretrainConfig c;
  c.lr = pretrain_lr;
  c.epochs = pretrain_epochs;
  c.seed = derive_seed(seed, "pretrain");
  return c;
}

PipelineConfig parse_config(const std::string& ini_text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }

  PipelineConfig c;
  auto find_field = [](const std::string& section, const std::string& key) -> const Field* {
    for (const auto& f : fields())
      if (f.section == section && f.key == key) return &f;
    return nullptr;
  };
  auto apply = [&](const std::string& section, const std::string& key, const std::string& value) {
    const Field* f = find_field(section, key);
    if (!f) throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    try {
      f->set(c, f->path(), value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("invalid value '" + value + "' for " + f->path() + ": " + e.what());
    }
  };

  for (const auto& [name, node] : tree) {
    if (node.empty()) {  // top-level key
      apply("", name, node.data());
      continue;
    }
    if (std::find(kSections.begin(), kSections.end(), name) == kSections.end())
      throw ConfigError("unknown config section '" + name + "'");
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty()) throw ConfigError("nested keys are not allowed under [" + name + "]");
      apply(name, key, leaf.data());
    }
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_text(path));
}

std::string to_ini(const PipelineConfig& config) {
  std::ostringstream out;
  std::string current = "";
  for (const auto& f : fields()) {
    if (f.section != current) {
      out << "\n[" << f.section << "]\n";
      current = f.section;
    }
    out << f.key << " = " << f.get(config) << '\n';
  }
  return out.str();
}

nlohmann::json config_to_json(const PipelineConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) {
    if (f.section.empty()) j[f.key] = f.get(config);
    else j[f.section][f.key] = f.get(config);
  }
  return j;
}

}  // namespace grouppref
