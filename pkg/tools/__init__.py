# tools: 文本特徵、滿意度預測、排序學習、合成資料與報表
