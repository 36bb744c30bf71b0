#include "vitdec/commands.hpp"

#include <CLI11.hpp>

#include <cstdlib>

using namespace vitdec;

int main(int argc, char** argv) {
    CLI::App app{"vitdec - toy vision-transformer representation decomposition toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from a key=value file");

    cmd::GlobalOpts global;
    app.add_option("--artifact-root", global.artifact_root, "Directory artifact paths resolve against")
        ->envname("VITDEC_ARTIFACT_ROOT");
    app.add_flag("--error-json", global.error_json, "Print errors as machine-readable JSON on stderr");

    // dataset
    cmd::DatasetArgs dataset;
    CLI::App* c_dataset = app.add_subcommand("dataset", "Generate a synthetic dataset directory");
    c_dataset->add_option("--out", dataset.out, "Output directory")->required();
    c_dataset->add_option("--seed", dataset.seed, "Generation seed");
    c_dataset->add_option("--fg", dataset.n_fg, "Foreground class count");
    c_dataset->add_option("--bg", dataset.n_bg, "Background class count");
    c_dataset->add_option("--n-train", dataset.n_train, "Train split size");
    c_dataset->add_option("--n-val", dataset.n_val, "Val split size");
    c_dataset->add_option("--n-test", dataset.n_test, "Test split size");
    c_dataset->add_option("--rho-train", dataset.rho_train, "Train foreground/background correlation");
    c_dataset->add_option("--rho-val", dataset.rho_val, "Val correlation");
    c_dataset->add_option("--rho-test", dataset.rho_test, "Test correlation");
    c_dataset->add_option("--fg-alpha", dataset.fg_alpha, "Foreground opacity");
    c_dataset->add_option("--fg-half", dataset.fg_half, "Shape half-extent (fraction of image side)");
    c_dataset->add_option("--noise", dataset.noise, "Pixel noise sigma");
    c_dataset->add_option("--fg-style", dataset.fg_style, "distinct|mono|paired foreground classes");
    c_dataset->add_option("--image-size", dataset.image_size, "Image side in pixels");

    // train
    cmd::TrainArgs train;
    CLI::App* c_train = app.add_subcommand("train", "Train a toy encoder and save the model artifact");
    c_train->add_option("--dataset", train.dataset, "Dataset directory")->required();
    c_train->add_option("--out", train.out, "Output model artifact")->required();
    c_train->add_option("--variant", train.variant, "vanilla-cls|vanilla-meanpool|windowed|gridblock");
    c_train->add_option("--depth", train.depth, "Layer count");
    c_train->add_option("--heads", train.heads, "Attention heads");
    c_train->add_option("--dim", train.dim, "Embedding width");
    c_train->add_option("--patch-grid", train.patch_grid, "Tokens per side");
    c_train->add_option("--window", train.window, "Window side (windowed/gridblock)");
    c_train->add_option("--model-seed", train.model_seed, "Weight init seed");
    c_train->add_option("--train-seed", train.train_seed, "Training seed");
    c_train->add_option("--epochs", train.epochs, "Training epochs");
    c_train->add_option("--batch", train.batch, "Batch size");
    c_train->add_option("--lr", train.lr, "Learning rate");
    c_train->add_option("--target", train.target, "foreground|background|group");

    // decompose (+ verify)
    cmd::DecomposeArgs decompose;
    CLI::App* c_dec = app.add_subcommand("decompose", "Decompose a split into component contributions");
    c_dec->add_option("--model", decompose.model, "Model artifact");
    c_dec->add_option("--dataset", decompose.dataset, "Dataset directory");
    c_dec->add_option("--split", decompose.split, "train|val|test");
    c_dec->add_option("--granularity", decompose.granularity, "component|component-token");
    c_dec->add_option("--layers", decompose.layers, "Layers to decompose, from the last (-1: all)");
    c_dec->add_option("--tol", decompose.tol, "Reconstruction tolerance");
    c_dec->add_option("--out", decompose.out, "Output artifact");
    std::string verify_path;
    CLI::App* c_dec_verify = c_dec->add_subcommand("verify", "Re-check a decomposition artifact");
    c_dec_verify->add_option("--in", verify_path, "Decomposition artifact")->required();

    // align (+ report)
    cmd::AlignArgs align;
    CLI::App* c_align = app.add_subcommand("align", "Train per-component alignment maps");
    c_align->add_option("--decomp", align.decomp, "Decomposition artifact (train split)");
    c_align->add_option("--teacher", align.teacher, "Teacher model artifact");
    c_align->add_option("--dataset", align.dataset, "Dataset directory");
    c_align->add_option("--val-decomp", align.val_decomp, "Optional decomposition for validation");
    c_align->add_option("--out", align.out, "Output aligner artifact");
    c_align->add_option("--lambda", align.lambda, "Orthogonality weight (default 1/d_ref)");
    c_align->add_flag("--no-penalty", align.no_penalty, "Drop the orthogonality term");
    c_align->add_flag("--single-map", align.single_map, "Tie all maps to one matrix");
    c_align->add_option("--lr", align.lr, "Learning rate");
    c_align->add_option("--epochs", align.epochs, "Epochs");
    c_align->add_option("--batch", align.batch, "Batch size");
    c_align->add_option("--seed", align.seed, "Training seed");
    std::string report_path;
    CLI::App* c_align_report = c_align->add_subcommand("report", "Print the orthogonality table");
    c_align_report->add_option("--in", report_path, "Aligner artifact")->required();

    // score
    cmd::ScoreArgs score;
    CLI::App* c_score = app.add_subcommand("score", "Component x feature importance scores");
    c_score->add_option("--decomp", score.decomp, "Decomposition artifact")->required();
    c_score->add_option("--aligner", score.aligner, "Aligner artifact")->required();
    c_score->add_option("--teacher", score.teacher, "Teacher model artifact")->required();
    c_score->add_option("--out", score.out, "Output score JSON")->required();
    c_score->add_option("--top-k", score.top_k, "Rows printed per feature");

    // retrieve
    cmd::RetrieveArgs retrieve;
    CLI::App* c_ret = app.add_subcommand("retrieve", "Feature-specific image retrieval");
    c_ret->add_option("--mode", retrieve.mode, "text|image");
    c_ret->add_option("--decomp", retrieve.decomp, "Decomposition artifact")->required();
    c_ret->add_option("--scores", retrieve.scores, "Score JSON")->required();
    c_ret->add_option("--aligner", retrieve.aligner, "Aligner artifact (text mode)");
    c_ret->add_option("--teacher", retrieve.teacher, "Teacher artifact (text mode)");
    c_ret->add_option("--feature", retrieve.feature, "Feature name");
    c_ret->add_option("--instantiation", retrieve.instantiation, "Prototype name, e.g. bg0");
    c_ret->add_option("--k-comp", retrieve.k_comp, "Components used");
    c_ret->add_option("--k-img", retrieve.k_img, "Images returned");
    c_ret->add_option("--ref-image", retrieve.ref_image, "Reference image id (image mode)");
    c_ret->add_option("--out", retrieve.out, "Output JSON")->required();

    // heatmap
    cmd::HeatmapArgs heatmap;
    CLI::App* c_heat = app.add_subcommand("heatmap", "Per-token contribution heatmap");
    c_heat->add_option("--decomp", heatmap.decomp, "Decomposition artifact (component-token)")->required();
    c_heat->add_option("--aligner", heatmap.aligner, "Aligner artifact")->required();
    c_heat->add_option("--scores", heatmap.scores, "Score JSON")->required();
    c_heat->add_option("--teacher", heatmap.teacher, "Teacher artifact")->required();
    c_heat->add_option("--feature", heatmap.feature, "Feature name");
    c_heat->add_option("--instantiation", heatmap.instantiation, "Prototype name")->required();
    c_heat->add_option("--k-comp", heatmap.k_comp, "Components used");
    c_heat->add_option("--image", heatmap.image, "Dataset image id");
    c_heat->add_option("--cell-pixels", heatmap.cell_pixels, "Pixels per token cell");
    c_heat->add_option("--out", heatmap.out, "Output PPM (JSON sidecar alongside)")->required();

    // ablate
    cmd::AblateArgs ablate;
    CLI::App* c_abl = app.add_subcommand("ablate", "Cumulative mean-ablation accuracy curve");
    c_abl->add_option("--model", ablate.model, "Model artifact")->required();
    c_abl->add_option("--decomp", ablate.decomp, "Decomposition artifact")->required();
    c_abl->add_option("--dataset", ablate.dataset, "Dataset directory")->required();
    c_abl->add_option("--target", ablate.target, "foreground|background|group");
    c_abl->add_option("--out", ablate.out, "Output JSON")->required();
    c_abl->add_option("--svg", ablate.svg, "Optional SVG rendering");

    // mitigate
    cmd::MitigateArgs mitigate;
    CLI::App* c_mit = app.add_subcommand("mitigate", "Mean-ablate spuriously correlated components");
    c_mit->add_option("--model", mitigate.model, "Model artifact")->required();
    c_mit->add_option("--decomp", mitigate.decomp, "Decomposition artifact (eval split)")->required();
    c_mit->add_option("--scores", mitigate.scores, "Score JSON")->required();
    c_mit->add_option("--dataset", mitigate.dataset, "Dataset directory")->required();
    c_mit->add_option("--spurious", mitigate.spurious, "Spurious feature name");
    c_mit->add_option("--core", mitigate.core, "Restrict the gap to this feature (default: all)");
    c_mit->add_option("--k", mitigate.k, "Components to ablate (default max(2, N/6))");
    c_mit->add_option("--out", mitigate.out, "Output JSON")->required();

    CLI11_PARSE(app, argc, argv);

    if (c_dataset->parsed()) return cmd::guarded<cmd::DatasetArgs, cmd::cmd_dataset>(global, "dataset", dataset);
    if (c_train->parsed()) return cmd::guarded<cmd::TrainArgs, cmd::cmd_train>(global, "train", train);
    if (c_dec->parsed()) {
        if (c_dec_verify->parsed())
            return cmd::guarded<std::string, cmd::cmd_decompose_verify>(global, "decompose verify", verify_path);
        return cmd::guarded<cmd::DecomposeArgs, cmd::cmd_decompose>(global, "decompose", decompose);
    }
    if (c_align->parsed()) {
        if (c_align_report->parsed())
            return cmd::guarded<std::string, cmd::cmd_align_report>(global, "align report", report_path);
        return cmd::guarded<cmd::AlignArgs, cmd::cmd_align>(global, "align", align);
    }
    if (c_score->parsed()) return cmd::guarded<cmd::ScoreArgs, cmd::cmd_score>(global, "score", score);
    if (c_ret->parsed()) return cmd::guarded<cmd::RetrieveArgs, cmd::cmd_retrieve>(global, "retrieve", retrieve);
    if (c_heat->parsed()) return cmd::guarded<cmd::HeatmapArgs, cmd::cmd_heatmap>(global, "heatmap", heatmap);
    if (c_abl->parsed()) return cmd::guarded<cmd::AblateArgs, cmd::cmd_ablate>(global, "ablate", ablate);
    if (c_mit->parsed()) return cmd::guarded<cmd::MitigateArgs, cmd::cmd_mitigate>(global, "mitigate", mitigate);
    return 0;
}
