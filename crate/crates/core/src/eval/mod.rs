//! Evaluation harnesses for the vision and labeling stages.

pub mod ablation;
pub mod occlusion;

pub use ablation::{
    ablation_sim, ablation_text, combined_variation, default_text_notes, AblationRow, AblationSetup, AblationTable,
    AblationVariable, CombinedInputs, Labeler, TrialStats, HVAC_NOTES, INSULATION_NOTES, NEUTRAL_NOTE,
};
pub use occlusion::{
    cosine_distance, grid_cells, mask_cell, occlusion_run, read_mask_csv, region_stats, render_heatmap, Cell,
    RegionStats,
};
