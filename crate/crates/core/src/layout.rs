//! Rendered element hierarchy and the per-page render result.

use serde::{Deserialize, Serialize};

use crate::dom::TagTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutNode {
    pub tag: String,
    /// `[x, y, width, height]` of the border box in document coordinates.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_area: bool,
    /// Concatenated direct text children, whitespace-collapsed.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,
    /// Computed foreground colour as sRGB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    #[serde(default)]
    pub children: Vec<LayoutNode>,
}

impl LayoutNode {
    pub fn new(tag: impl Into<String>, bbox: [f64; 4]) -> Self {
        LayoutNode {
            tag: tag.into(),
            bbox,
            zero_area: bbox[2] <= 0.0 || bbox[3] <= 0.0,
            text: String::new(),
            color: None,
            children: Vec::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<LayoutNode>) -> Self {
        self.children = children;
        self
    }

    pub fn with_text(mut self, text: impl Into<String>, color: [u8; 3]) -> Self {
        self.text = text.into();
        self.color = Some(color);
        self
    }

    pub fn tag_tree(&self) -> TagTree {
        TagTree::node(
            self.tag.clone(),
            self.children.iter().map(LayoutNode::tag_tree).collect(),
        )
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&LayoutNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(LayoutNode::node_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderArtifact {
    pub id: String,
    #[serde(skip)]
    pub screenshot: Option<Vec<u8>>,
    pub layout: Option<LayoutNode>,
    /// Full page size in CSS pixels as captured.
    pub page_size: [f64; 2],
    pub render_ok: bool,
    pub failure_reason: Option<String>,
    /// The page was taller than the configured maximum and was cut off.
    #[serde(default)]
    pub clipped: bool,
    /// Remote images answered with the local placeholder.
    #[serde(default)]
    pub substituted_images: usize,
}

impl RenderArtifact {
    pub fn failed(id: impl Into<String>, reason: impl Into<String>) -> Self {
        RenderArtifact {
            id: id.into(),
            screenshot: None,
            layout: None,
            page_size: [0.0, 0.0],
            render_ok: false,
            failure_reason: Some(reason.into()),
            clipped: false,
            substituted_images: 0,
        }
    }
}
