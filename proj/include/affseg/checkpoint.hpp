// Model checkpoints: a directory of named tensor files, a plain-text
// manifest (`name path` lines) and a `config.txt` echo of the model and
// stage configuration as `key = value` lines.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "affseg/model.hpp"
#include "affseg/tensor_io.hpp"
#include "affseg/trainer.hpp"

namespace affseg {

namespace detail {

inline std::string sanitize_filename(std::string name) {
  for (char& c : name)
    if (c == '.' || c == '/') c = '_';
  return name + ".axt";
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ToyModel& m,
                            const StageConfig& train_cfg) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> entries;
  visit_parameters(m, [&](const std::string& name, const Tensor& t) {
    const std::string file = detail::sanitize_filename(name);
    write_tensor(dir / file, t);
    entries.emplace_back(name, file);
  });
  write_manifest(dir, entries);

  std::ofstream os(dir / "config.txt");
  if (!os) throw IoError("cannot write config in " + dir.string());
  os << "image_channels = " << m.cfg.image_channels << "\n"
     << "backbone_channels = " << m.cfg.backbone_channels << "\n"
     << "head_channels = " << m.cfg.head_channels << "\n"
     << "num_fg_classes = " << m.cfg.num_fg_classes << "\n"
     << "fusion_hidden = " << m.cfg.fusion_hidden << "\n"
     << "downsample = " << m.cfg.downsample << "\n"
     << "max_epochs = " << train_cfg.max_epochs << "\n"
     << "patience = " << train_cfg.patience << "\n"
     << "lr0 = " << train_cfg.lr0 << "\n"
     << "poly_power = " << train_cfg.poly_power << "\n"
     << "batch_size = " << train_cfg.batch_size << "\n"
     << "num_stages = " << train_cfg.num_stages << "\n"
     << "seed = " << train_cfg.seed << "\n";
}

inline ToyModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.txt");
  if (!is) throw IoError("cannot read config in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  ModelConfig cfg;
  cfg.image_channels = std::stoi(kv.at("image_channels"));
  cfg.backbone_channels = std::stoi(kv.at("backbone_channels"));
  cfg.head_channels = std::stoi(kv.at("head_channels"));
  cfg.num_fg_classes = std::stoi(kv.at("num_fg_classes"));
  cfg.fusion_hidden = std::stoi(kv.at("fusion_hidden"));
  cfg.downsample = std::stoi(kv.at("downsample"));

  ToyModel m = make_model(cfg, 0);
  std::map<std::string, std::string> manifest;
  for (const auto& [name, file] : read_manifest(dir)) manifest[name] = file;
  visit_parameters(m, [&](const std::string& name, Tensor& t) {
    const auto it = manifest.find(name);
    if (it == manifest.end())
      throw IoError("checkpoint missing tensor: " + name);
    Tensor loaded = read_tensor(dir / it->second);
    if (loaded.shape() != t.shape())
      throw IoError("checkpoint tensor shape mismatch: " + name);
    t = std::move(loaded);
  });
  return m;
}

}  // namespace affseg
