use serde::Serialize;

/// Output formats shared by every analyzer report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
    Csv,
}

pub trait Report: Serialize {
    fn to_table(&self) -> String;

    /// Only reports with a natural row structure support CSV.
    fn to_csv(&self) -> Option<String> {
        None
    }

    fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// `None` when the report has no rendering in `format`.
    fn render(&self, format: Format) -> Option<String> {
        match format {
            Format::Json => Some(self.to_json()),
            Format::Table => Some(self.to_table()),
            Format::Csv => self.to_csv(),
        }
    }
}

impl Report for crate::model::CountReport {
    fn to_table(&self) -> String {
        crate::model::CountReport::to_table(self)
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("part,params,flops\n");
        for p in &self.parts {
            s.push_str(&format!("{},{},{}\n", p.name, p.params, p.flops));
        }
        s.push_str(&format!("total,{},{}\n", self.params, self.flops));
        Some(s)
    }
}
