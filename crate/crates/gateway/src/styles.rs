use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Visual style served to every console from one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTokens {
    pub colors: BTreeMap<String, String>,
    pub fonts: BTreeMap<String, String>,
    /// Alert severity and process state to color.
    pub severity: BTreeMap<String, String>,
    /// Spacing scale in pixels, smallest first.
    pub spacing: Vec<u32>,
}

fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

impl Default for StyleTokens {
    fn default() -> Self {
        StyleTokens {
            colors: map(&[
                ("background", "#10151c"),
                ("surface", "#1b232e"),
                ("text", "#e6edf3"),
                ("muted", "#8b98a5"),
                ("accent", "#3fa7ff"),
                ("border", "#2d3a48"),
            ]),
            fonts: map(&[
                ("body", "14px 'DejaVu Sans', sans-serif"),
                ("mono", "13px 'DejaVu Sans Mono', monospace"),
                ("heading", "600 16px 'DejaVu Sans', sans-serif"),
            ]),
            severity: map(&[
                ("warning", "#e3b341"),
                ("critical", "#f85149"),
                ("ready", "#3fb950"),
                ("starting", "#58a6ff"),
                ("pending", "#8b98a5"),
                ("failed", "#f85149"),
                ("stopped", "#6e7681"),
            ]),
            spacing: vec![2, 4, 8, 12, 16, 24],
        }
    }
}
