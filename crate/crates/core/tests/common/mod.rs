pub mod attention_oracle;
