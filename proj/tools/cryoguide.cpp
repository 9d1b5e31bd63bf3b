#include "cryoguide/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  namespace cmd = cryoguide::cmd;
  CLI::App app{"Density-guided sampling of atomic models with analytic diffusion priors"};
  app.require_subcommand(1);

  cmd::SimulateArgs sim;
  auto* s = app.add_subcommand("simulate-map", "Simulate a density map from a PDB model");
  s->add_option("model", sim.model, "Input PDB")->required()->check(CLI::ExistingFile);
  s->add_option("-o,--out", sim.out, "Output MRC")->required();
  s->add_option("-r,--resolution", sim.resolution, "Resolution (A)");
  s->add_option("--voxel", sim.voxel, "Voxel size (A)");
  s->add_option("--pad", sim.pad, "Margin around the model (voxels)");
  s->add_option("--box", sim.box, "Pad the grid to at least this many voxels per side");

  cmd::PointCloudArgs pc;
  auto* p = app.add_subcommand("pointcloud", "Extract a weighted point cloud from a map");
  p->add_option("map", pc.map, "Input MRC")->required()->check(CLI::ExistingFile);
  p->add_option("-k,--k", pc.k, "Number of points");
  p->add_option("--atoms", pc.n_atoms, "Atom count for the default number of points");
  p->add_option("--threshold", pc.threshold, "Zero voxels below this level first");
  p->add_option("--dust", pc.dust, "Remove components smaller than this many voxels");
  p->add_option("--seed", pc.seed, "Clustering seed");
  p->add_option("-o,--out", pc.out, "Output text file (x y z w per line); default stdout");
  p->add_option("--pdb", pc.pdb, "Also write the points as pseudo-atoms");

  std::string config;
  std::vector<std::string> overrides;
  auto* g = app.add_subcommand("guide", "Guided sampling run driven by a config file");
  g->add_option("config", config, "key=value config file")->required()->check(CLI::ExistingFile);
  g->add_option("--set", overrides, "Override a config entry (key=value)");

  auto* u = app.add_subcommand("sample", "Unguided sampling with the same config and output layout");
  u->add_option("config", config, "key=value config file")->required()->check(CLI::ExistingFile);
  u->add_option("--set", overrides, "Override a config entry (key=value)");

  cmd::ScoreArgs sc;
  auto* e = app.add_subcommand("score", "Compare a model with a reference (and a map)");
  e->add_option("sample", sc.sample, "Model PDB")->required()->check(CLI::ExistingFile);
  e->add_option("reference", sc.reference, "Reference PDB")->required()->check(CLI::ExistingFile);
  e->add_option("--map", sc.map, "Map for RSCC")->check(CLI::ExistingFile);
  e->add_option("-r,--resolution", sc.resolution, "Map resolution (A); default from the map header");
  e->add_option("--local", sc.local, "Residue range for local RMSD, CHAIN:LO-HI");
  e->add_flag("--kv", sc.key_value, "Print key=value lines");

  std::string mobile, target, aligned_out;
  auto* a = app.add_subcommand("align", "Superpose one PDB onto another");
  a->add_option("mobile", mobile, "PDB to move")->required()->check(CLI::ExistingFile);
  a->add_option("target", target, "Fixed PDB")->required()->check(CLI::ExistingFile);
  a->add_option("-o,--out", aligned_out, "Write the superposed model");

  cmd::PrepArgs pr;
  double crop_level = 0.0;
  auto* m = app.add_subcommand("prep", "Threshold, dust, crop and mask a map");
  m->add_option("map", pr.map, "Input MRC")->required()->check(CLI::ExistingFile);
  m->add_option("-o,--out", pr.out, "Output MRC")->required();
  m->add_option("--threshold", pr.threshold, "Zero voxels below this level");
  m->add_option("--dust", pr.dust, "Remove components smaller than this many voxels");
  auto* crop = m->add_option("--crop", crop_level, "Crop to voxels at or above this level");
  m->add_option("--pad", pr.pad, "Margin kept around the crop (voxels)");
  m->add_option("--mask-model", pr.mask_model, "Zero voxels far from this model")->check(CLI::ExistingFile);
  m->add_option("--mask-radius", pr.mask_radius, "Mask radius (A)");

  cmd::DemoArgs dm;
  auto* d = app.add_subcommand("demo", "Write (and optionally run) the two-conformation demo");
  d->add_option("-o,--out", dm.out, "Output directory");
  d->add_option("-n,--samples", dm.n_samples, "Guided samples");
  d->add_option("--seed", dm.seed, "Seed");
  d->add_flag("--run", dm.run, "Run the guided sampler and report the outcome");

  CLI11_PARSE(app, argc, argv);

  auto& out = std::cout;
  auto& err = std::cerr;
  if (*s) return cmd::simulate_map(sim, out, err);
  if (*p) return cmd::pointcloud(pc, out, err);
  if (*g) return cmd::guide(config, overrides, out, err);
  if (*u) return cmd::sample(config, overrides, out, err);
  if (*e) return cmd::score(sc, out, err);
  if (*a) return cmd::align(mobile, target, aligned_out, out, err);
  if (*m) {
    if (*crop) pr.crop_level = crop_level;
    return cmd::prep(pr, out, err);
  }
  if (*d) return cmd::demo(dm, out, err);
  return 1;
}
