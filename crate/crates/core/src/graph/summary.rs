use std::fmt;

use serde::Serialize;

use super::ModelGraph;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub layer: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
    pub conv_layers: usize,
}

impl Summary {
    pub(super) fn of<T: Element>(graph: &ModelGraph<T>, batch: usize) -> Self {
        let rows: Vec<SummaryRow> = graph
            .topo_order()
            .iter()
            .map(|&id| {
                let n = &graph.nodes()[id];
                let mut shape = n.shape.clone();
                shape[0] = batch;
                let layer = match n.layer() {
                    Some(l) => layer_label(&l.kind()),
                    None => "input".into(),
                };
                SummaryRow { name: n.name.clone(), layer, output_shape: shape, params: n.param_count() }
            })
            .collect();
        let total_params = rows.iter().map(|r| r.params).sum();
        Summary { rows, total_params, conv_layers: graph.count_conv_layers() }
    }

    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn layer_label(kind: &crate::layers::LayerKind) -> String {
    use crate::layers::LayerKind as K;
    match kind {
        K::Conv2d(s) => format!("conv{}x{}/s{}", s.kernel_h, s.kernel_w, s.stride),
        K::BatchNorm2d { .. } => "batchnorm".into(),
        K::Relu => "relu".into(),
        K::Dropout { rate } => format!("dropout({rate})"),
        K::Concat => "concat".into(),
        K::Add => "add".into(),
        K::GlobalAvgPool => "global_avg_pool".into(),
        K::FullyConnected { .. } => "fully_connected".into(),
        K::SoftmaxOutput => "softmax".into(),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("×");
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let layer_w = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<name_w$}  {:<layer_w$}  {:<16}  {:>10}", "node", "layer", "output", "params")?;
        for r in &self.rows {
            writeln!(f, "{:<name_w$}  {:<layer_w$}  {:<16}  {:>10}", r.name, r.layer, shape(&r.output_shape), r.params)?;
        }
        writeln!(f, "total params: {}", self.total_params)?;
        write!(f, "conv layers: {}", self.conv_layers)
    }
}
